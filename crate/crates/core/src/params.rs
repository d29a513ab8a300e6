//! Named trainable tensors and the layers built on them.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vfa_tensor::{conv, same_padding, Element, Tensor, Var};

use crate::error::{Result, VfaError};

/// Ordered collection of named leaf variables.
///
/// Layers hold indices into the store. Updating a parameter replaces
/// its leaf with a fresh one; values are never mutated in place.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    vars: Vec<Var<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            vars: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let idx = self.vars.len();
        self.lookup.insert(name.clone(), idx);
        self.names.push(name);
        self.vars.push(Var::param(value));
        idx
    }

    pub fn get(&self, idx: usize) -> &Var<T> {
        &self.vars[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<T>)> {
        self.names.iter().map(String::as_str).zip(&self.vars)
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    /// Replaces the value of parameter `idx` (shape must match).
    pub fn set(&mut self, idx: usize, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.vars[idx].shape() {
            return Err(VfaError::dimension(
                "param",
                format!(
                    "{}: expected {:?}, got {:?}",
                    self.names[idx],
                    self.vars[idx].shape(),
                    value.shape()
                ),
            ));
        }
        self.vars[idx] = Var::param(value);
        Ok(())
    }

    /// Substitutes an arbitrary variable of matching shape, e.g. one
    /// owned by a gradient checker.
    pub fn set_var(&mut self, idx: usize, var: Var<T>) -> Result<()> {
        if var.shape() != self.vars[idx].shape() {
            return Err(VfaError::dimension(
                "param",
                format!("{}: expected {:?}, got {:?}", self.names[idx], self.vars[idx].shape(), var.shape()),
            ));
        }
        self.vars[idx] = var;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.vars.iter().for_each(Var::zero_grad);
    }

    pub fn count(&self) -> usize {
        self.vars.iter().map(Var::numel).sum()
    }

    /// Snapshot of all values.
    pub fn values(&self) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| v.value().clone()).collect()
    }

    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(VfaError::Input(format!(
                "expected {} parameter tensors, got {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (i, v) in values.into_iter().enumerate() {
            self.set(i, v)?;
        }
        Ok(())
    }
}

/// "Same"-padded convolution with bias, stride 1.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub kernel: usize,
}

impl ConvLayer {
    /// Fan-in scaled uniform initialisation, sized for a leaky rectifier
    /// with slope 0.2; bias uniform in `±1/√fan_in`.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ndim: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Self {
        let taps = kernel.pow(ndim as u32);
        let fan_in = (c_in * taps) as f64;
        let bound = (6.0 / ((1.0 + 0.2f64 * 0.2) * fan_in)).sqrt();
        let mut shape = vec![c_out, c_in];
        shape.extend(std::iter::repeat_n(kernel, ndim));
        let w = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        let bb = 1.0 / fan_in.sqrt();
        let b = Tensor::from_fn([c_out], |_| T::of(rng.random_range(-bb..bb)));
        ConvLayer {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            kernel,
        }
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(conv(
            x,
            store.get(self.weight),
            Some(store.get(self.bias)),
            1,
            same_padding(self.kernel),
        )?)
    }
}
