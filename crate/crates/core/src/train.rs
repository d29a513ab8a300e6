//! Training: one optimisation step, the epoch loop and its history.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vfa_tensor::{Element, Tensor, Var};

use crate::error::{Result, VfaError};
use crate::geometry::{flip_axis, grid_sample, KeypointSet};
use crate::losses::{LossConfig, LossInputs};
use crate::metrics::LabelMap;
use crate::model::{level_stats, Registration, VfaModel};
use crate::optim::{Adam, AdamConfig};

/// A fixed/moving image pair with optional supervision.
#[derive(Debug, Clone)]
pub struct Pair<T: Element> {
    /// `[1, spatial..]`.
    pub fixed: Tensor<T>,
    pub moving: Tensor<T>,
    pub fixed_labels: Option<LabelMap>,
    pub moving_labels: Option<LabelMap>,
    pub keypoints: Option<KeypointSet>,
}

impl<T: Element> Pair<T> {
    pub fn new(fixed: Tensor<T>, moving: Tensor<T>) -> Result<Self> {
        if fixed.shape() != moving.shape() {
            return Err(VfaError::Input(format!(
                "fixed image {:?} and moving image {:?} differ in shape",
                fixed.shape(),
                moving.shape()
            )));
        }
        Ok(Pair {
            fixed,
            moving,
            fixed_labels: None,
            moving_labels: None,
            keypoints: None,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.fixed.shape()[1..]
    }

    /// Reverses the given spatial axes of everything in the pair at once.
    pub fn flipped(&self, axes: &[usize]) -> Pair<T> {
        let mut out = self.clone();
        let dims = self.dims().to_vec();
        for &ax in axes {
            out.fixed = flip_axis(&out.fixed, ax);
            out.moving = flip_axis(&out.moving, ax);
            for labels in [&mut out.fixed_labels, &mut out.moving_labels].into_iter().flatten() {
                let t = Tensor::new(
                    [1].into_iter().chain(labels.dims.iter().copied()).collect::<Vec<_>>(),
                    labels.data.iter().map(|&v| v as f64).collect(),
                )
                .expect("label shape");
                labels.data = flip_axis(&t, ax).data().iter().map(|&v| v as i32).collect();
            }
            if let Some(kp) = out.keypoints.as_mut() {
                let top = (dims[ax] - 1) as f64;
                for p in kp.fixed.iter_mut().chain(kp.moving.iter_mut()) {
                    p[ax] = top - p[ax];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    /// Steps per epoch; defaults to the number of training pairs.
    pub steps_per_epoch: Option<usize>,
    pub flip_augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            loss: LossConfig::preset("t1-atlas").expect("built-in preset"),
            epochs: 1,
            steps_per_epoch: None,
            flip_augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub total: f64,
    /// Unweighted term values in recipe order.
    pub terms: Vec<f64>,
    /// β after the update.
    pub beta: f64,
}

/// Forward pass and loss of one pair, without updating anything.
pub fn pair_loss<T: Element>(
    model: &VfaModel<T>,
    pair: &Pair<T>,
    loss: &LossConfig,
) -> Result<(crate::losses::LossValue<T>, Registration<T>)> {
    if loss.needs_labels() && (pair.fixed_labels.is_none() || pair.moving_labels.is_none()) {
        return Err(VfaError::Usage("this loss recipe needs label maps for both images".into()));
    }
    if loss.needs_keypoints() && pair.keypoints.is_none() {
        return Err(VfaError::Usage("this loss recipe needs keypoints".into()));
    }
    let fixed = Var::constant(pair.fixed.clone());
    let moving = Var::constant(pair.moving.clone());
    let reg = model.register(&fixed, &moving)?;
    let warped = grid_sample(&moving, &reg.phi)?;
    let (fixed_oh, warped_oh) = match (&pair.fixed_labels, &pair.moving_labels) {
        (Some(a), Some(b)) if loss.needs_labels() => {
            let mut classes = a.classes();
            classes.extend(b.classes());
            classes.sort_unstable();
            classes.dedup();
            let fa = Var::constant(a.one_hot::<T>(&classes));
            let mb = Var::constant(b.one_hot::<T>(&classes));
            (Some(fa), Some(grid_sample(&mb, &reg.phi)?))
        }
        _ => (None, None),
    };
    let value = loss.evaluate(&LossInputs {
        fixed: &fixed,
        warped: &warped,
        phi: &reg.phi,
        fixed_labels: fixed_oh.as_ref(),
        warped_labels: warped_oh.as_ref(),
        keypoints: pair.keypoints.as_ref(),
    })?;
    Ok((value, reg))
}

/// Register, compute the loss, backpropagate and apply one optimiser update.
pub fn train_step<T: Element>(model: &mut VfaModel<T>, opt: &mut Adam, pair: &Pair<T>, loss: &LossConfig) -> Result<StepReport> {
    model.store.zero_grad();
    let (value, reg) = pair_loss(model, pair, loss)?;
    let total = value.total.item().as_f64();
    if !total.is_finite() || value.terms.iter().any(|t| !t.is_finite()) {
        let stats = level_stats(&reg)
            .iter()
            .enumerate()
            .map(|(i, [lo, hi, mean])| format!("level {i}: |u| min {lo:.4e} max {hi:.4e} mean {mean:.4e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(VfaError::NonFinite(format!(
            "loss {total} (terms {:?}), beta {}; {stats}",
            value.terms,
            model.beta()
        )));
    }
    value.total.backward()?;
    opt.step(&mut model.store)?;
    Ok(StepReport {
        total,
        terms: value.terms,
        beta: model.beta(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Global step counter, starting at 1.
    pub step: usize,
    pub total: f64,
    pub terms: Vec<f64>,
    pub beta: f64,
    /// Filled on the last step of each epoch.
    pub val_metric: Option<f64>,
}

/// Column header of the history CSV.
pub fn history_header(loss: &LossConfig) -> String {
    let mut cols = vec!["epoch".to_string(), "step".into(), "total".into()];
    cols.extend(loss.labels());
    cols.push("beta".into());
    cols.push("val_metric".into());
    cols.join(",")
}

pub fn write_history_csv<W: Write>(mut w: W, loss: &LossConfig, rows: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(w, "{}", history_header(loss))?;
    for r in rows {
        let mut cells = vec![r.epoch.to_string(), r.step.to_string(), r.total.to_string()];
        cells.extend(r.terms.iter().map(|t| t.to_string()));
        cells.push(r.beta.to_string());
        cells.push(r.val_metric.map(|v| v.to_string()).unwrap_or_default());
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitResult<T: Element> {
    pub history: Vec<HistoryRow>,
    /// Parameter values at the epoch with the lowest validation metric.
    pub best: Vec<Tensor<T>>,
    pub best_metric: f64,
    pub best_epoch: usize,
}

/// Mean loss over `pairs` without augmentation.
pub fn validation_loss<T: Element>(model: &VfaModel<T>, pairs: &[Pair<T>], loss: &LossConfig) -> Result<f64> {
    let mut sum = 0.0;
    for p in pairs {
        sum += pair_loss(model, p, loss)?.0.total.item().as_f64();
    }
    Ok(sum / pairs.len() as f64)
}

/// Epoch loop with random paired flips, per-step history and retention
/// of the best parameters by validation loss. Without a validation set
/// the epoch's mean training loss is tracked instead.
pub fn fit<T: Element>(
    model: &mut VfaModel<T>,
    train: &[Pair<T>],
    val: &[Pair<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&HistoryRow),
) -> Result<FitResult<T>> {
    if train.is_empty() {
        return Err(VfaError::Usage("training set is empty".into()));
    }
    cfg.loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.optimizer);
    let steps = cfg.steps_per_epoch.unwrap_or(train.len());
    let d = model.config.ndim;
    let mut history = Vec::with_capacity(cfg.epochs * steps);
    let mut best = (f64::INFINITY, 0, model.store.values());
    let mut global = 0;
    for epoch in 1..=cfg.epochs {
        let mut epoch_sum = 0.0;
        for s in 0..steps {
            let base = &train[rng.random_range(0..train.len())];
            let pair = if cfg.flip_augment {
                let axes: Vec<usize> = (0..d).filter(|_| rng.random_bool(0.5)).collect();
                base.flipped(&axes)
            } else {
                base.clone()
            };
            let rep = train_step(model, &mut opt, &pair, &cfg.loss)?;
            epoch_sum += rep.total;
            global += 1;
            let mut row = HistoryRow {
                epoch,
                step: global,
                total: rep.total,
                terms: rep.terms,
                beta: rep.beta,
                val_metric: None,
            };
            if s + 1 == steps {
                let metric = if val.is_empty() {
                    epoch_sum / steps as f64
                } else {
                    validation_loss(model, val, &cfg.loss)?
                };
                row.val_metric = Some(metric);
                if metric < best.0 {
                    best = (metric, epoch, model.store.values());
                }
            }
            on_step(&row);
            history.push(row);
        }
    }
    Ok(FitResult {
        history,
        best: best.2,
        best_metric: best.0,
        best_epoch: best.1,
    })
}
