//! Dense transforms and the differentiable operations that consume them.
//!
//! All coordinates are voxel indices. A [`TransformGrid`] maps every
//! voxel `x` of the output grid to an absolute sampling location
//! `φ(x)` in the source image; warping is `I_w(x) = I_m(φ(x))`.
//! Channel `j` of a field always refers to spatial axis `j`.
//!
//! Internally a transform stores only its displacement `u = φ − id`, so
//! converting between the two representations is lossless and the
//! identity is exactly zero.

use vfa_tensor::{grid_sample as sample, Element, Tensor, Var};

use crate::error::{Result, VfaError};

/// Voxel extents plus physical spacing (millimetres per voxel).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeShape {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
}

impl VolumeShape {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(VfaError::Parameter(format!(
                "only 2D and 3D volumes are supported, got {} axes",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(VfaError::Parameter(format!("extents must be positive, got {dims:?}")));
        }
        if spacing.len() != dims.len() || spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VfaError::Parameter(format!(
                "spacing must be positive with one entry per axis, got {spacing:?}"
            )));
        }
        Ok(VolumeShape { dims, spacing })
    }

    pub fn unit(dims: Vec<usize>) -> Result<Self> {
        let n = dims.len();
        Self::new(dims, vec![1.0; n])
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Paired landmarks in voxel units; `moving[i]` corresponds to `fixed[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub fixed: Vec<Vec<f64>>,
    pub moving: Vec<Vec<f64>>,
    /// Millimetres per voxel along each axis.
    pub spacing: Vec<f64>,
}

impl KeypointSet {
    pub fn new(fixed: Vec<Vec<f64>>, moving: Vec<Vec<f64>>, spacing: Vec<f64>) -> Result<Self> {
        if fixed.len() != moving.len() {
            return Err(VfaError::Input(format!(
                "{} fixed keypoints but {} moving keypoints",
                fixed.len(),
                moving.len()
            )));
        }
        let d = spacing.len();
        for (i, p) in fixed.iter().chain(&moving).enumerate() {
            if p.len() != d || p.iter().any(|v| !v.is_finite()) {
                return Err(VfaError::Input(format!(
                    "keypoint {} must have {d} finite coordinates, got {p:?}",
                    i % fixed.len().max(1)
                )));
            }
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VfaError::Parameter(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(KeypointSet { fixed, moving, spacing })
    }

    pub fn len(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.spacing.len()
    }

    /// Indices of fixed keypoints outside `[0, extent − 1]` on some axis.
    pub fn outside(&self, dims: &[usize]) -> Vec<usize> {
        self.fixed
            .iter()
            .enumerate()
            .filter(|(_, p)| p.iter().zip(dims).any(|(&c, &n)| !(c >= 0.0 && c <= (n - 1) as f64)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// `[d, spatial..]` tensor whose channel `j` holds the index along axis `j`.
pub fn identity_coords<T: Element>(dims: &[usize]) -> Tensor<T> {
    let mut shape = vec![dims.len()];
    shape.extend_from_slice(dims);
    Tensor::from_fn(shape, |i| T::of(i[i[0] + 1] as f64))
}

fn check_field<T: Element>(v: &Var<T>) -> Result<()> {
    let s = v.shape();
    if s.len() < 3 || s.len() > 4 || s[0] != s.len() - 1 {
        return Err(VfaError::dimension(
            "field",
            format!("expected [d, spatial..] with d = number of spatial axes, got {s:?}"),
        ));
    }
    Ok(())
}

/// Per-voxel relative offsets `u`, shape `[d, spatial..]`.
#[derive(Clone, Debug)]
pub struct DisplacementField<T: Element>(Var<T>);

impl<T: Element> DisplacementField<T> {
    pub fn new(u: Var<T>) -> Result<Self> {
        check_field(&u)?;
        if !u.value().all_finite() {
            return Err(VfaError::Input("displacement field contains NaN or Inf".into()));
        }
        Ok(DisplacementField(u))
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let mut shape = vec![dims.len()];
        shape.extend_from_slice(dims);
        Self::new(Var::constant(Tensor::zeros(shape)))
    }

    pub fn var(&self) -> &Var<T> {
        &self.0
    }

    pub fn into_var(self) -> Var<T> {
        self.0
    }

    pub fn dims(&self) -> &[usize] {
        &self.0.shape()[1..]
    }

    pub fn ndim(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Absolute sampling locations `φ = u + id`.
#[derive(Clone, Debug)]
pub struct TransformGrid<T: Element> {
    disp: Var<T>,
}

impl<T: Element> TransformGrid<T> {
    /// `φ(x) = x` on a grid of the given extents.
    pub fn identity(dims: &[usize]) -> Result<Self> {
        Ok(Self::from_displacement(DisplacementField::zeros(dims)?))
    }

    /// `φ = u + id`; lossless.
    pub fn from_displacement(u: DisplacementField<T>) -> Self {
        TransformGrid { disp: u.0 }
    }

    /// Builds a transform from absolute coordinates.
    pub fn from_coords(phi: &Var<T>) -> Result<Self> {
        check_field(phi)?;
        let id = Var::constant(identity_coords::<T>(&phi.shape()[1..]));
        Ok(TransformGrid { disp: phi.sub(&id)? })
    }

    pub fn displacement(&self) -> DisplacementField<T> {
        DisplacementField(self.disp.clone())
    }

    pub fn disp_var(&self) -> &Var<T> {
        &self.disp
    }

    /// Absolute coordinates as a differentiable `[d, spatial..]` value.
    pub fn coords(&self) -> Result<Var<T>> {
        let id = Var::constant(identity_coords::<T>(self.dims()));
        Ok(self.disp.add(&id)?)
    }

    pub fn dims(&self) -> &[usize] {
        &self.disp.shape()[1..]
    }

    pub fn ndim(&self) -> usize {
        self.disp.shape()[0]
    }

    /// Absolute coordinates in f64, channel-major.
    pub fn coords_f64(&self) -> Vec<f64> {
        let id = identity_coords::<f64>(self.dims());
        self.disp
            .data()
            .iter()
            .zip(id.data())
            .map(|(u, x)| u.as_f64() + x)
            .collect()
    }
}

/// Linear resampling of `img: [C, spatial..]` at `φ`, clamping at the border.
pub fn grid_sample<T: Element>(img: &Var<T>, phi: &TransformGrid<T>) -> Result<Var<T>> {
    if img.shape().len() != phi.ndim() + 1 {
        return Err(VfaError::dimension(
            "grid_sample",
            format!("image {:?} vs {}-D transform", img.shape(), phi.ndim()),
        ));
    }
    Ok(sample(img, &phi.coords()?)?)
}

/// `compose(a, b)(x) = b(a(x))`, so warping by the result equals warping
/// by `b` first and then by `a`: `warp(I, compose(a, b)) = warp(warp(I, b), a)`.
///
/// `b` is evaluated by linear interpolation of its displacement with
/// border clamping, which keeps constant shifts exact up to the border.
pub fn compose<T: Element>(a: &TransformGrid<T>, b: &TransformGrid<T>) -> Result<TransformGrid<T>> {
    if a.dims() != b.dims() {
        return Err(VfaError::dimension(
            "compose",
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let ub_at_a = sample(&b.disp, &a.coords()?)?;
    Ok(TransformGrid {
        disp: a.disp.add(&ub_at_a)?,
    })
}

/// Doubles the grid resolution. The displacement is upsampled with the
/// cell-centred linear rule and multiplied by two; the identity part is
/// rebuilt on the fine grid.
pub fn upsample_transform<T: Element>(phi: &TransformGrid<T>) -> Result<TransformGrid<T>> {
    Ok(TransformGrid {
        disp: phi.disp.upsample2()?.scale(2.0),
    })
}

/// Inverse of [`upsample_transform`]: average-pooled displacement, halved.
pub fn downsample_transform<T: Element>(phi: &TransformGrid<T>) -> Result<TransformGrid<T>> {
    Ok(TransformGrid {
        disp: phi.disp.downsample2()?.scale(0.5),
    })
}

/// Integrates a stationary velocity field: `φ ← id + v / 2^steps`, then
/// `steps` self-compositions.
pub fn scaling_and_squaring<T: Element>(v: &DisplacementField<T>, steps: usize) -> Result<TransformGrid<T>> {
    if steps == 0 {
        return Err(VfaError::Parameter("scaling and squaring needs at least one step".into()));
    }
    let mut phi = TransformGrid {
        disp: v.0.scale(1.0 / (1u64 << steps) as f64),
    };
    for _ in 0..steps {
        phi = compose(&phi, &phi)?;
    }
    Ok(phi)
}

/// `φ = β·u + id` with a scalar, differentiable `β`.
pub fn apply_beta<T: Element>(u: &DisplacementField<T>, beta: &Var<T>) -> Result<TransformGrid<T>> {
    if beta.numel() != 1 {
        return Err(VfaError::dimension("apply_beta", format!("beta must be scalar, got {:?}", beta.shape())));
    }
    let b = if beta.shape().is_empty() { beta.clone() } else { beta.reshape(Vec::<usize>::new())? };
    Ok(TransformGrid { disp: u.0.mul(&b)? })
}

/// Reverses spatial `axis` (0-based, channel axis excluded) of a `[C, spatial..]` tensor.
pub fn flip_axis<T: Element>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = t.shape().to_vec();
    let ax = axis + 1;
    Tensor::from_fn(shape.clone(), |i| {
        let mut j = i.to_vec();
        j[ax] = shape[ax] - 1 - i[ax];
        t.get(&j)
    })
}
