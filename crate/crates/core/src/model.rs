//! The multi-resolution registration network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vfa_tensor::{Element, Tensor, Var};

use crate::attention::{vfa_attention, AttentionConfig};
use crate::error::{Result, VfaError};
use crate::extractor::{extract_pair, describe, Extractor, ExtractorConfig, FeaturePyramid};
use crate::geometry::{apply_beta, compose, grid_sample, scaling_and_squaring, upsample_transform, DisplacementField, TransformGrid};
use crate::params::{ConvLayer, ParamStore};

pub const BETA_PARAM: &str = "beta";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Spatial dimensionality, 2 or 3.
    pub ndim: usize,
    pub extractor: ExtractorConfig,
    pub attention: AttentionConfig,
    /// Initial value of the shared displacement scale.
    pub beta0: f64,
    /// Integrate every level's field by scaling and squaring.
    pub diffeomorphic: bool,
    pub ss_steps: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ndim: 3,
            extractor: ExtractorConfig::default(),
            attention: AttentionConfig::default(),
            beta0: 0.1,
            diffeomorphic: false,
            ss_steps: 7,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.ndim) {
            return Err(VfaError::Parameter(format!("ndim must be 2 or 3, got {}", self.ndim)));
        }
        self.extractor.validate()?;
        self.attention.validate()?;
        if !self.beta0.is_finite() {
            return Err(VfaError::Parameter(format!("beta0 must be finite, got {}", self.beta0)));
        }
        if self.diffeomorphic && self.ss_steps == 0 {
            return Err(VfaError::Parameter("scaling and squaring needs at least one step".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.extractor.levels()
    }
}

/// Everything computed at one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelOutput<T: Element> {
    /// Transform accumulated up to and including this level.
    pub phi: TransformGrid<T>,
    /// The coarser transform upsampled to this level (identity at the coarsest).
    pub upsampled: TransformGrid<T>,
    /// Raw attention output before β.
    pub local: DisplacementField<T>,
    /// Attention map `[N, w^d]`.
    pub weights: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Registration<T: Element> {
    /// Final full-resolution transform.
    pub phi: TransformGrid<T>,
    /// Per level, index 0 finest.
    pub levels: Vec<LevelOutput<T>>,
}

#[derive(Debug, Clone)]
pub struct VfaModel<T: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    fixed_net: Extractor,
    moving_net: Extractor,
    match_fixed: Vec<ConvLayer>,
    match_moving: Vec<ConvLayer>,
    beta: usize,
}

impl<T: Element> VfaModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.ndim;
        let ex = &config.extractor;
        let (fixed_net, moving_net) = crate::extractor::PairExtractor::build(&mut store, &mut rng, d, ex)?;
        let mut match_fixed = Vec::new();
        let mut match_moving = Vec::new();
        for (i, &c) in ex.channels.iter().enumerate() {
            let mc = ex.match_channels;
            match_fixed.push(ConvLayer::new(&mut store, &mut rng, &format!("match{i}.fixed"), d, c, mc, ex.kernel));
            match_moving.push(ConvLayer::new(&mut store, &mut rng, &format!("match{i}.moving"), d, c, mc, ex.kernel));
        }
        let beta = store.add(BETA_PARAM, Tensor::scalar(T::of(config.beta0)));
        Ok(VfaModel {
            config,
            store,
            fixed_net,
            moving_net,
            match_fixed,
            match_moving,
            beta,
        })
    }

    pub fn beta(&self) -> f64 {
        self.store.get(self.beta).item().as_f64()
    }

    pub fn beta_var(&self) -> &Var<T> {
        self.store.get(self.beta)
    }

    pub fn set_beta(&mut self, value: f64) -> Result<()> {
        self.store.set(self.beta, Tensor::scalar(T::of(value)))
    }

    pub fn describe(&self) -> String {
        describe(&self.store)
    }

    pub fn pyramids(&self, fixed: &Var<T>, moving: &Var<T>) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>)> {
        if fixed.shape().len() != self.config.ndim + 1 {
            return Err(VfaError::Input(format!(
                "expected a [1, spatial..] image with {} spatial axes, got {:?}",
                self.config.ndim,
                fixed.shape()
            )));
        }
        extract_pair(&self.store, &self.config.extractor, &self.fixed_net, &self.moving_net, fixed, moving)
    }

    /// Coarse-to-fine registration of `moving` onto `fixed`, both `[1, spatial..]`.
    pub fn register(&self, fixed: &Var<T>, moving: &Var<T>) -> Result<Registration<T>> {
        let (pf, pm) = self.pyramids(fixed, moving)?;
        let beta = self.beta_var();
        let levels = self.config.levels();
        let mut outputs = Vec::with_capacity(levels);
        let mut prev: Option<TransformGrid<T>> = None;
        for i in (0..levels).rev() {
            let dims = pf.levels[i].shape()[1..].to_vec();
            let (upsampled, moving_feat) = match &prev {
                None => (TransformGrid::identity(&dims)?, pm.levels[i].clone()),
                Some(p) => {
                    let up = upsample_transform(p)?;
                    let warped = grid_sample(&pm.levels[i], &up)?;
                    (up, warped)
                }
            };
            let f = self.match_fixed[i].forward(&self.store, &pf.levels[i])?;
            let m = self.match_moving[i].forward(&self.store, &moving_feat)?;
            let att = vfa_attention(&f, &m, &self.config.attention)?;
            let local = if self.config.diffeomorphic {
                let b = beta.reshape(Vec::<usize>::new())?;
                let v = DisplacementField::new(att.displacement.var().mul(&b)?)?;
                scaling_and_squaring(&v, self.config.ss_steps)?
            } else {
                apply_beta(&att.displacement, beta)?
            };
            let phi = if prev.is_none() { local } else { compose(&local, &upsampled)? };
            prev = Some(phi.clone());
            outputs.push(LevelOutput {
                phi,
                upsampled,
                local: att.displacement,
                weights: att.weights,
            });
        }
        outputs.reverse();
        Ok(Registration {
            phi: outputs[0].phi.clone(),
            levels: outputs,
        })
    }
}

/// `min/max/mean |u|` of each level's raw attention field, finest first.
pub fn level_stats<T: Element>(reg: &Registration<T>) -> Vec<[f64; 3]> {
    reg.levels
        .iter()
        .map(|l| {
            let d = l.local.var().data();
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for v in d {
                let a = v.as_f64().abs();
                lo = lo.min(a);
                hi = hi.max(a);
                sum += a;
            }
            [lo, hi, sum / d.len() as f64]
        })
        .collect()
}
