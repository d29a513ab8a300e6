//! U-shaped convolutional feature extractor.
//!
//! The encoder runs two 3×3 convolutions per level, halving the
//! resolution with average pooling between levels. The decoder starts
//! from the coarsest encoder output and, at every finer level,
//! upsamples, concatenates the encoder features of that level and
//! applies one convolution. The decoder outputs form the pyramid,
//! ordered fine to coarse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vfa_tensor::{concat, Element, Tensor, Var};

use crate::error::{Result, VfaError};
use crate::params::{ConvLayer, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Channel width of every pyramid level, fine to coarse. The number
    /// of entries is the number of levels.
    pub channels: Vec<usize>,
    /// Width after the per-level convolution that precedes matching.
    pub match_channels: usize,
    /// One extractor for both images (intra-modal) or one each.
    pub shared_weights: bool,
    pub kernel: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            channels: vec![8, 16, 32, 64, 128],
            match_channels: 16,
            shared_weights: true,
            kernel: 3,
        }
    }
}

impl ExtractorConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Every width halved (rounded up), the "half" model variant.
    pub fn halved(&self) -> Self {
        ExtractorConfig {
            channels: self.channels.iter().map(|c| c.div_ceil(2)).collect(),
            match_channels: self.match_channels.div_ceil(2),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) || self.match_channels == 0 {
            return Err(VfaError::Parameter(format!(
                "channel widths must be positive and at least one level is required, got {:?} / {}",
                self.channels, self.match_channels
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(VfaError::Parameter(format!("kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Extents must be divisible by this for every level to halve exactly.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn check_extents(&self, dims: &[usize]) -> Result<()> {
        let div = self.divisor();
        if dims.iter().any(|&d| d % div != 0 || d == 0) {
            return Err(VfaError::Input(format!(
                "image extents {dims:?} must be divisible by {div} for {} levels; pad the volume first",
                self.levels()
            )));
        }
        Ok(())
    }
}

/// Feature maps `[C_i, spatial_i..]`, level 0 at full resolution.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Element> {
    pub levels: Vec<Var<T>>,
}

impl<T: Element> FeaturePyramid<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(|l| l.value().all_finite())
    }
}

/// Layer handles of one extractor; weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Extractor {
    encoder: Vec<[ConvLayer; 2]>,
    decoder: Vec<ConvLayer>,
}

impl Extractor {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        ndim: usize,
        cfg: &ExtractorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let mut encoder = Vec::with_capacity(cfg.levels());
        let mut c_in = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            encoder.push([
                ConvLayer::new(store, rng, &format!("{prefix}.enc{i}.0"), ndim, c_in, c, k),
                ConvLayer::new(store, rng, &format!("{prefix}.enc{i}.1"), ndim, c, c, k),
            ]);
            c_in = c;
        }
        let mut decoder = Vec::with_capacity(cfg.levels().saturating_sub(1));
        for i in 0..cfg.levels() - 1 {
            let c_cat = cfg.channels[i + 1] + cfg.channels[i];
            decoder.push(ConvLayer::new(store, rng, &format!("{prefix}.dec{i}"), ndim, c_cat, cfg.channels[i], k));
        }
        Ok(Extractor { encoder, decoder })
    }

    /// `img: [1, spatial..]` to a pyramid with one entry per level.
    pub fn extract<T: Element>(&self, store: &ParamStore<T>, img: &Var<T>) -> Result<FeaturePyramid<T>> {
        let levels = self.encoder.len();
        let mut enc = Vec::with_capacity(levels);
        let mut x = img.clone();
        for (i, [a, b]) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = x.downsample2()?;
            }
            x = a.forward(store, &x)?.leaky_relu(LEAKY_SLOPE);
            x = b.forward(store, &x)?.leaky_relu(LEAKY_SLOPE);
            enc.push(x.clone());
        }
        let mut out = vec![x; levels];
        for i in (0..levels - 1).rev() {
            let up = out[i + 1].upsample2()?;
            let cat = concat(&[up, enc[i].clone()], 0)?;
            out[i] = self.decoder[i].forward(store, &cat)?.leaky_relu(LEAKY_SLOPE);
        }
        Ok(FeaturePyramid { levels: out })
    }
}

/// One or two extractors with their own parameter store.
#[derive(Debug, Clone)]
pub struct PairExtractor<T: Element> {
    pub config: ExtractorConfig,
    pub store: ParamStore<T>,
    fixed: Extractor,
    moving: Extractor,
}

impl<T: Element> PairExtractor<T> {
    pub fn new(ndim: usize, cfg: ExtractorConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fixed, moving) = Self::build(&mut store, &mut rng, ndim, &cfg)?;
        Ok(PairExtractor { config: cfg, store, fixed, moving })
    }

    /// Registers the extractor layers in an existing store.
    pub fn build(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        ndim: usize,
        cfg: &ExtractorConfig,
    ) -> Result<(Extractor, Extractor)> {
        if cfg.shared_weights {
            let e = Extractor::new(store, rng, "extractor", ndim, cfg)?;
            Ok((e.clone(), e))
        } else {
            let f = Extractor::new(store, rng, "extractor_fixed", ndim, cfg)?;
            let m = Extractor::new(store, rng, "extractor_moving", ndim, cfg)?;
            Ok((f, m))
        }
    }

    pub fn extract_pair(&self, fixed: &Var<T>, moving: &Var<T>) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>)> {
        extract_pair(&self.store, &self.config, &self.fixed, &self.moving, fixed, moving)
    }

    pub fn describe(&self) -> String {
        describe(&self.store)
    }
}

/// Pyramids of both images; validates shapes first.
pub fn extract_pair<T: Element>(
    store: &ParamStore<T>,
    cfg: &ExtractorConfig,
    fixed_net: &Extractor,
    moving_net: &Extractor,
    fixed: &Var<T>,
    moving: &Var<T>,
) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>)> {
    if fixed.shape() != moving.shape() {
        return Err(VfaError::Input(format!(
            "fixed image {:?} and moving image {:?} differ in shape",
            fixed.shape(),
            moving.shape()
        )));
    }
    if fixed.shape().first() != Some(&1) {
        return Err(VfaError::Input(format!("expected a single-channel image, got {:?}", fixed.shape())));
    }
    cfg.check_extents(&fixed.shape()[1..])?;
    Ok((fixed_net.extract(store, fixed)?, moving_net.extract(store, moving)?))
}

/// One line per parameter tensor plus the total count.
pub fn describe<T: Element>(store: &ParamStore<T>) -> String {
    let mut s = String::new();
    for (name, v) in store.iter() {
        s.push_str(&format!("{name} {:?} {}\n", v.shape(), v.numel()));
    }
    s.push_str(&format!("total {}\n", store.count()));
    s
}

/// Parameter count of one extractor for a given configuration, without building it.
pub fn parameter_count(ndim: usize, cfg: &ExtractorConfig) -> usize {
    let taps = cfg.kernel.pow(ndim as u32);
    let conv = |ci: usize, co: usize| co * ci * taps + co;
    let mut total = 0;
    let mut c_in = 1;
    for &c in &cfg.channels {
        total += conv(c_in, c) + conv(c, c);
        c_in = c;
    }
    for i in 0..cfg.levels().saturating_sub(1) {
        total += conv(cfg.channels[i + 1] + cfg.channels[i], cfg.channels[i]);
    }
    total
}

/// Zero-filled single-channel image of the given extents, for shape probes.
pub fn blank_image<T: Element>(dims: &[usize]) -> Var<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(dims);
    Var::constant(Tensor::zeros(shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExtractorConfig {
        ExtractorConfig {
            channels: vec![2, 3, 4, 5, 6],
            match_channels: 2,
            shared_weights: true,
            kernel: 3,
        }
    }

    #[test]
    fn pyramid_shapes_3d() {
        let ex = PairExtractor::<f32>::new(3, small(), 1).unwrap();
        let img = blank_image::<f32>(&[32, 32, 32]);
        let (f, _) = ex.extract_pair(&img, &img).unwrap();
        assert_eq!(f.len(), 5);
        for (i, l) in f.levels.iter().enumerate() {
            let e = 32 >> i;
            assert_eq!(l.shape(), &[small().channels[i], e, e, e]);
        }
        assert!(f.all_finite());
    }

    #[test]
    fn indivisible_extent_is_input_error() {
        let ex = PairExtractor::<f64>::new(2, small(), 1).unwrap();
        let img = blank_image::<f64>(&[24, 20]);
        let err = ex.extract_pair(&img, &img).unwrap_err();
        assert!(matches!(err, VfaError::Input(ref m) if m.contains("pad")));
    }

    #[test]
    fn shared_vs_separate_weights() {
        let img = Var::constant(Tensor::<f64>::from_fn([1, 16, 16], |i| ((i[1] * 3 + i[2]) as f64).sin()));
        let shared = PairExtractor::<f64>::new(2, small(), 4).unwrap();
        let (f, m) = shared.extract_pair(&img, &img).unwrap();
        for (a, b) in f.levels.iter().zip(&m.levels) {
            assert_eq!(a.value(), b.value());
        }
        let cfg = ExtractorConfig { shared_weights: false, ..small() };
        let sep = PairExtractor::<f64>::new(2, cfg, 4).unwrap();
        let (f, m) = sep.extract_pair(&img, &img).unwrap();
        assert_ne!(f.levels[0].value(), m.levels[0].value());
        assert_eq!(sep.store.count(), 2 * shared.store.count());
    }

    #[test]
    fn parameter_count_matches_store() {
        for ndim in [2, 3] {
            let cfg = ExtractorConfig::default();
            let ex = PairExtractor::<f32>::new(ndim, cfg.clone(), 0).unwrap();
            assert_eq!(ex.store.count(), parameter_count(ndim, &cfg));
            let ratio = parameter_count(ndim, &cfg) as f64 / parameter_count(ndim, &cfg.halved()) as f64;
            assert!((3.5..4.1).contains(&ratio), "ratio {ratio}");
        }
    }
}
