//! Declarative run configuration (TOML).
//!
//! Every key is optional; unset keys keep the preset or built-in default.
//!
//! ```toml
//! preset = "t1-atlas"
//! train_dir = "data/train"
//! temperature = "sqrt_dk"   # or a positive number
//! beta0 = 0.1
//! levels = 3
//! channels = [8, 16, 32]
//! lambda = 1.0              # weight of the diffusion term
//! weights = { ncc = 1.0 }   # per-term weight overrides
//! seed = 7
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{Similarity, Temperature};
use crate::error::{Result, VfaError};
use crate::losses::{LossConfig, TermKind};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// `"sqrt_dk"` or a positive constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TemperatureSpec {
    Fixed(f64),
    Named(NamedTemperature),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedTemperature {
    SqrtDk,
}

impl From<TemperatureSpec> for Temperature {
    fn from(t: TemperatureSpec) -> Self {
        match t {
            TemperatureSpec::Fixed(v) => Temperature::Fixed(v),
            TemperatureSpec::Named(NamedTemperature::SqrtDk) => Temperature::SqrtDk,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub ndim: Option<usize>,
    pub temperature: Option<TemperatureSpec>,
    pub similarity: Option<Similarity>,
    pub beta0: Option<f64>,
    pub window: Option<usize>,
    pub levels: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub match_channels: Option<usize>,
    pub shared_weights: Option<bool>,
    pub lambda: Option<f64>,
    pub weights: Option<BTreeMap<String, f64>>,
    pub ncc_window: Option<usize>,
    pub mi_bins: Option<usize>,
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
    pub diffeomorphic: Option<bool>,
    pub ss_steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub flip_augment: Option<bool>,
}

fn term_kind(name: &str) -> Result<TermKind> {
    use TermKind::*;
    [Ncc, Mi, Mse, Diffusion, Dice, Tre]
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| VfaError::Parameter(format!("unknown loss term {name:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            VfaError::Parse {
                line,
                msg: e.message().to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VfaError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Values set in `other` replace those in `self`.
    pub fn merged_over(self, base: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: self.$f.or(base.$f)),* } };
        }
        pick!(
            preset, train_dir, val_dir, out_dir, ndim, temperature, similarity, beta0, window, levels, channels,
            match_channels, shared_weights, lambda, weights, ncc_window, mi_bins, seed, deterministic,
            diffeomorphic, ss_steps, learning_rate, epochs, steps_per_epoch, flip_augment
        )
    }

    /// Loss recipe: preset (default `t1-atlas`) with overrides applied.
    pub fn loss(&self) -> Result<LossConfig> {
        let mut loss = LossConfig::preset(self.preset.as_deref().unwrap_or("t1-atlas"))?;
        if let Some(l) = self.lambda {
            match loss.terms.iter_mut().find(|t| t.kind == TermKind::Diffusion) {
                Some(t) => t.weight = l,
                None => return Err(VfaError::Parameter("lambda given but the recipe has no diffusion term".into())),
            }
        }
        for (name, &w) in self.weights.iter().flatten() {
            let kind = term_kind(name)?;
            match loss.terms.iter_mut().find(|t| t.kind == kind) {
                Some(t) => t.weight = w,
                None => loss.terms.push(crate::losses::WeightedTerm { kind, weight: w }),
            }
        }
        if let Some(w) = self.ncc_window {
            loss.ncc_window = w;
        }
        if let Some(b) = self.mi_bins {
            loss.mi_bins = b;
        }
        loss.validate()?;
        Ok(loss)
    }

    /// Model configuration with overrides applied to `base`.
    pub fn model(&self, mut base: ModelConfig) -> Result<ModelConfig> {
        if let Some(d) = self.ndim {
            base.ndim = d;
        }
        if let Some(c) = &self.channels {
            base.extractor.channels = c.clone();
        }
        if let Some(l) = self.levels {
            if l == 0 {
                return Err(VfaError::Parameter("levels must be at least 1".into()));
            }
            let ch = &mut base.extractor.channels;
            while ch.len() < l {
                let last = *ch.last().unwrap_or(&8);
                ch.push(last * 2);
            }
            ch.truncate(l);
        }
        if let Some(m) = self.match_channels {
            base.extractor.match_channels = m;
        }
        if let Some(s) = self.shared_weights {
            base.extractor.shared_weights = s;
        }
        if let Some(t) = self.temperature {
            base.attention.temperature = t.into();
        }
        if let Some(s) = self.similarity {
            base.attention.similarity = s;
        }
        if let Some(w) = self.window {
            base.attention.window = w;
        }
        if let Some(b) = self.beta0 {
            base.beta0 = b;
        }
        if let Some(d) = self.diffeomorphic {
            base.diffeomorphic = d;
        }
        if let Some(s) = self.ss_steps {
            base.ss_steps = s;
        }
        if let Some(s) = self.seed {
            base.seed = s;
        }
        base.validate()?;
        Ok(base)
    }

    pub fn train(&self, mut base: TrainConfig) -> Result<TrainConfig> {
        base.loss = self.loss()?;
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(VfaError::Parameter(format!("learning rate must be positive, got {lr}")));
            }
            base.optimizer.lr = lr;
        }
        if let Some(e) = self.epochs {
            base.epochs = e;
        }
        if let Some(s) = self.steps_per_epoch {
            if s == 0 {
                return Err(VfaError::Parameter("steps_per_epoch must be positive".into()));
            }
            base.steps_per_epoch = Some(s);
        }
        if let Some(f) = self.flip_augment {
            base.flip_augment = f;
        }
        if let Some(s) = self.seed {
            base.seed = s;
        }
        Ok(base)
    }
}
