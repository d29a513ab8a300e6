//! Synthetic image pairs with known, fold-free ground-truth transforms.
//!
//! A structured moving image is drawn first. A displacement is then made
//! from white Gaussian noise, smoothed per channel with a separable
//! Gaussian (replicate border) and scaled so that its largest vector
//! norm equals the requested magnitude. The fixed image is the moving
//! image warped by that transform, so the ground truth `φ_gt` maps fixed
//! voxels to moving locations exactly as a registration should.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use vfa_tensor::{Tensor, Var};

use crate::error::{Result, VfaError};
use crate::geometry::{grid_sample, DisplacementField, KeypointSet, TransformGrid};
use crate::metrics::{nd_voxels, warp_labels_nearest, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageKind {
    /// Overlapping Gaussian blobs; labels mark each blob's core.
    Blobs,
    /// Ellipsoidal "organs" of distinct intensity with a checker texture.
    CheckerOrgans,
    /// Smoothed noise; labels are intensity terciles.
    Texture,
}

impl std::str::FromStr for ImageKind {
    type Err = VfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(ImageKind::Blobs),
            "checker-organs" => Ok(ImageKind::CheckerOrgans),
            "texture" => Ok(ImageKind::Texture),
            other => Err(VfaError::Parameter(format!(
                "unknown image kind {other:?}; expected blobs, checker-organs or texture"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: ImageKind,
    pub dims: Vec<usize>,
    /// Standard deviation of the smoothing kernel, voxels.
    pub smoothness: f64,
    /// Largest displacement norm, voxels.
    pub max_displacement: f64,
    pub keypoints: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: ImageKind::Blobs,
            dims: vec![64, 64],
            smoothness: 8.0,
            max_displacement: 4.0,
            keypoints: 16,
            seed: 0,
            max_retries: 20,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dims.len()) || self.dims.iter().any(|&d| d < 4) {
            return Err(VfaError::Parameter(format!(
                "synthetic volumes need 2 or 3 axes of at least 4 voxels, got {:?}",
                self.dims
            )));
        }
        if !(self.smoothness > 0.0) || !self.smoothness.is_finite() {
            return Err(VfaError::Parameter(format!("smoothness must be positive, got {}", self.smoothness)));
        }
        if !(self.max_displacement >= 0.0) || !self.max_displacement.is_finite() {
            return Err(VfaError::Parameter(format!(
                "max displacement must be nonnegative, got {}",
                self.max_displacement
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    /// `[1, spatial..]`, intensities in `[0, 1]`.
    pub fixed: Tensor<f64>,
    pub moving: Tensor<f64>,
    pub phi: TransformGrid<f64>,
    pub fixed_labels: LabelMap,
    pub moving_labels: LabelMap,
    pub keypoints: KeypointSet,
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for ax in (0..dims.len()).rev() {
        idx[ax] = flat % dims[ax];
        flat /= dims[ax];
    }
    idx
}

/// Separable Gaussian smoothing of a row-major field, replicate border.
pub fn gaussian_smooth(data: &[f64], dims: &[usize], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let strides = vfa_tensor::strides(dims);
    let mut cur = data.to_vec();
    for (ax, &n) in dims.iter().enumerate() {
        let mut next = vec![0.0; cur.len()];
        for (p, out) in next.iter_mut().enumerate() {
            let i = (p / strides[ax]) % n;
            let base = p - i * strides[ax];
            *out = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let j = (i as isize + k as isize - radius).clamp(0, n as isize - 1) as usize;
                    w * cur[base + j * strides[ax]]
                })
                .sum();
        }
        cur = next;
    }
    cur
}

fn normalise(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - lo) / span);
}

fn structured_image(kind: ImageKind, dims: &[usize], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<i32>) {
    let n: usize = dims.iter().product();
    let d = dims.len();
    let min_dim = *dims.iter().min().unwrap() as f64;
    match kind {
        ImageKind::Blobs => {
            let blobs: Vec<(Vec<f64>, f64, f64)> = (0..6)
                .map(|_| {
                    let c = dims.iter().map(|&e| rng.random_range(0.15..0.85) * e as f64).collect();
                    (c, rng.random_range(min_dim / 12.0..min_dim / 6.0), rng.random_range(0.3..1.0))
                })
                .collect();
            let mut img = vec![0.0; n];
            let mut labels = vec![0; n];
            for p in 0..n {
                let idx = unravel(p, dims);
                let mut best = 0.5;
                for (k, (c, s, a)) in blobs.iter().enumerate() {
                    let r2: f64 = idx.iter().zip(c).map(|(&i, &ci)| (i as f64 - ci).powi(2)).sum();
                    let g = (-r2 / (2.0 * s * s)).exp();
                    img[p] += a * g;
                    if g > best {
                        best = g;
                        labels[p] = k as i32 + 1;
                    }
                }
            }
            normalise(&mut img);
            (img, labels)
        }
        ImageKind::CheckerOrgans => {
            let organs: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..4)
                .map(|_| {
                    let c = dims.iter().map(|&e| rng.random_range(0.25..0.75) * e as f64).collect();
                    let r = (0..d).map(|_| rng.random_range(min_dim / 8.0..min_dim / 4.0)).collect();
                    (c, r, rng.random_range(0.3..0.9))
                })
                .collect();
            let mut img = vec![0.1; n];
            let mut labels = vec![0; n];
            for p in 0..n {
                let idx = unravel(p, dims);
                for (k, (c, r, a)) in organs.iter().enumerate() {
                    let q: f64 = (0..d).map(|j| ((idx[j] as f64 - c[j]) / r[j]).powi(2)).sum();
                    if q <= 1.0 {
                        let checker = if idx.iter().map(|&i| i / 4).sum::<usize>() % 2 == 0 { 0.08 } else { -0.08 };
                        img[p] = a + checker;
                        labels[p] = k as i32 + 1;
                    }
                }
            }
            let mut img = gaussian_smooth(&img, dims, 0.7);
            normalise(&mut img);
            (img, labels)
        }
        ImageKind::Texture => {
            let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let mut img = gaussian_smooth(&noise, dims, 2.0);
            normalise(&mut img);
            let labels = img.iter().map(|&v| (v * 3.0).floor().min(2.0) as i32).collect();
            (img, labels)
        }
    }
}

fn random_field(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<TransformGrid<f64>> {
    let dims = &spec.dims;
    let d = dims.len();
    let n: usize = dims.iter().product();
    let mut u = Vec::with_capacity(d * n);
    for _ in 0..d {
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        u.extend(gaussian_smooth(&noise, dims, spec.smoothness));
    }
    let peak = (0..n)
        .map(|p| (0..d).map(|c| u[c * n + p].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { spec.max_displacement / peak } else { 0.0 };
    u.iter_mut().for_each(|v| *v *= scale);
    let mut shape = vec![d];
    shape.extend_from_slice(dims);
    Ok(TransformGrid::from_displacement(DisplacementField::new(Var::constant(Tensor::new(shape, u)?))?))
}

/// Draws one pair. Folded transforms are redrawn up to `max_retries` times.
pub fn gen_synthetic_pair(spec: &SynthSpec) -> Result<SynthPair> {
    spec.validate()?;
    let dims = spec.dims.clone();
    let d = dims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (img, labels) = structured_image(spec.kind, &dims, &mut rng);
    let mut img_shape = vec![1];
    img_shape.extend_from_slice(&dims);
    let moving = Tensor::new(img_shape, img)?;
    let moving_labels = LabelMap::new(dims.clone(), labels)?;

    let mut phi = None;
    for _ in 0..=spec.max_retries {
        let cand = random_field(spec, &mut rng)?;
        if dims.iter().all(|&e| e >= 3) && nd_voxels(&cand)?.count > 0 {
            continue;
        }
        phi = Some(cand);
        break;
    }
    let phi = phi.ok_or_else(|| {
        VfaError::Parameter(format!(
            "no fold-free displacement of magnitude {} found in {} attempts; lower the magnitude or raise the smoothness",
            spec.max_displacement,
            spec.max_retries + 1
        ))
    })?;
    let fixed = grid_sample(&Var::constant(moving.clone()), &phi)?.value().clone();
    let fixed_labels = warp_labels_nearest(&moving_labels, &phi)?;

    let u_var = phi.disp_var();
    let mut fixed_pts = Vec::with_capacity(spec.keypoints);
    for _ in 0..spec.keypoints {
        fixed_pts.push(dims.iter().map(|&e| rng.random_range(1.0..(e - 2) as f64)).collect::<Vec<f64>>());
    }
    let moving_pts = if fixed_pts.is_empty() {
        Vec::new()
    } else {
        let pts = Var::constant(Tensor::from_fn([d, fixed_pts.len()], |i| fixed_pts[i[1]][i[0]]));
        let at = vfa_tensor::grid_sample(u_var, &pts)?;
        let np = fixed_pts.len();
        (0..np)
            .map(|p| (0..d).map(|j| fixed_pts[p][j] + at.data()[j * np + p]).collect())
            .collect()
    };
    let keypoints = KeypointSet::new(fixed_pts, moving_pts, vec![1.0; d])?;
    Ok(SynthPair {
        fixed,
        moving,
        phi,
        fixed_labels,
        moving_labels,
        keypoints,
    })
}
