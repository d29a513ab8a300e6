//! Adam without weight decay.

use serde::{Deserialize, Serialize};
use vfa_tensor::{Element, Tensor};

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments are kept in f64 regardless of the parameter type.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            self.m = store.vars().iter().map(|v| vec![0.0; v.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for idx in 0..store.len() {
            let var = store.get(idx);
            let Some(grad) = var.grad() else { continue };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data: Vec<T> = var
                .data()
                .iter()
                .zip(grad.data())
                .enumerate()
                .map(|(k, (&w, &g))| {
                    let g = g.as_f64();
                    m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                    v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                    let update = c.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                    T::of(w.as_f64() - update)
                })
                .collect();
            let shape = var.shape().to_vec();
            store.set(idx, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
        let loss = store.get(0).mul(&store.get(0).scale(3.0)).unwrap().sum();
        loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut store).unwrap();
        let w = store.get(0).data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
        assert!(store.get(0).grad().is_none());
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64([3], &[2.0, -3.0, 0.5]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let loss = store.get(0).square().sum();
            loss.backward().unwrap();
            opt.step(&mut store).unwrap();
        }
        assert!(store.get(0).data().iter().all(|v| v.abs() < 1e-2));
    }
}
