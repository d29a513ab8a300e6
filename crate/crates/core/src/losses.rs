//! Differentiable similarity, regularity and supervision terms.
//!
//! Images are `[C, spatial..]`; every loss returns a scalar `Var`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vfa_tensor::{conv, matmul, Element, Tensor, Var};

use crate::error::{Result, VfaError};
use crate::geometry::{KeypointSet, TransformGrid};

pub const NCC_EPS: f64 = 1e-5;
pub const DICE_EPS: f64 = 1e-5;
const MI_EPS: f64 = 1e-10;

fn same_shape<T: Element>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(VfaError::dimension(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn box_sum<T: Element>(x: &Var<T>, kernel: &Var<T>, pad: usize) -> Result<Var<T>> {
    Ok(conv(x, kernel, None, 1, pad)?)
}

/// Negative mean local normalised cross correlation over `window^d` boxes.
///
/// Per voxel, with box sums over the voxels of the box that lie inside
/// the image (`n` of them): `cross = ΣIJ − ΣIΣJ/n`,
/// `var_I = ΣI² − (ΣI)²/n`, and
/// `cc = (cross² + ε) / (var_I·var_J + ε)` with `ε = 1e-5`.
pub fn ncc_loss<T: Element>(fixed: &Var<T>, warped: &Var<T>, window: usize) -> Result<Var<T>> {
    same_shape("ncc_loss", fixed, warped)?;
    let dims = &fixed.shape()[1..];
    if window % 2 == 0 || window == 0 {
        return Err(VfaError::Parameter(format!("NCC window must be odd, got {window}")));
    }
    if dims.iter().any(|&n| window > n) {
        return Err(VfaError::Parameter(format!("NCC window {window} exceeds image extents {dims:?}")));
    }
    let d = dims.len();
    let pad = window / 2;
    let mut kshape = vec![1, 1];
    kshape.extend(std::iter::repeat_n(window, d));
    let kernel = Var::constant(Tensor::ones(kshape));
    let mut one_shape = vec![1];
    one_shape.extend_from_slice(dims);
    let count = box_sum(&Var::constant(Tensor::ones(one_shape.clone())), &kernel, pad)?;
    let inv_n = Var::constant(count.value().map(|c| T::one() / c));

    let mut terms = Vec::new();
    for c in 0..fixed.shape()[0] {
        let i = fixed.narrow(0, c, 1)?;
        let j = warped.narrow(0, c, 1)?;
        let si = box_sum(&i, &kernel, pad)?;
        let sj = box_sum(&j, &kernel, pad)?;
        let sii = box_sum(&i.square(), &kernel, pad)?;
        let sjj = box_sum(&j.square(), &kernel, pad)?;
        let sij = box_sum(&i.mul(&j)?, &kernel, pad)?;
        let cross = sij.sub(&si.mul(&sj)?.mul(&inv_n)?)?;
        let var_i = sii.sub(&si.square().mul(&inv_n)?)?;
        let var_j = sjj.sub(&sj.square().mul(&inv_n)?)?;
        let cc = cross.square().add_scalar(NCC_EPS).div(&var_i.mul(&var_j)?.add_scalar(NCC_EPS))?;
        terms.push(cc.mean());
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok(total.scale(-1.0 / terms.len() as f64))
}

/// Soft bin memberships `[N, B]` of intensities clamped to `[0, 1]`.
///
/// Bin `b` is centred at `b / (B − 1)`; the membership is a triangle of
/// half-width one bin spacing, so every intensity splits its unit mass
/// between the two nearest centres.
fn soft_bins<T: Element>(x: &Var<T>, bins: usize) -> Var<T> {
    let n = x.numel();
    let scale = (bins - 1) as f64;
    let mut out = vec![T::zero(); n * bins];
    let mut slope = vec![T::zero(); n * bins];
    for (p, &v) in x.data().iter().enumerate() {
        let raw = v.as_f64();
        let inside = (0.0..=1.0).contains(&raw);
        let pos = raw.clamp(0.0, 1.0) * scale;
        let lo = (pos.floor() as usize).min(bins - 2);
        let frac = pos - lo as f64;
        out[p * bins + lo] = T::of(1.0 - frac);
        out[p * bins + lo + 1] = T::of(frac);
        if inside {
            slope[p * bins + lo] = T::of(-scale);
            slope[p * bins + lo + 1] = T::of(scale);
        }
    }
    let slope = Arc::new(slope);
    Var::from_op(Tensor::new([n, bins], out).expect("bin shape"), vec![x.clone()], move |g| {
        let gx = (0..n)
            .map(|p| (0..bins).fold(T::zero(), |acc, b| acc + g[p * bins + b] * slope[p * bins + b]))
            .collect();
        vec![Some(gx)]
    })
}

fn plogp_sum<T: Element>(p: &Var<T>) -> Var<T> {
    p.mul(&p.add_scalar(MI_EPS).ln()).expect("same shape").sum()
}

/// Negative mutual information from a soft joint histogram with `bins`
/// bins per image. Intensities are expected in `[0, 1]`.
pub fn mi_loss<T: Element>(fixed: &Var<T>, warped: &Var<T>, bins: usize) -> Result<Var<T>> {
    same_shape("mi_loss", fixed, warped)?;
    if bins < 2 {
        return Err(VfaError::Parameter(format!("MI needs at least 2 bins, got {bins}")));
    }
    let n = fixed.numel();
    let wi = soft_bins(fixed, bins);
    let wj = soft_bins(warped, bins);
    let joint = matmul(&wi.transpose_last()?, &wj)?.scale(1.0 / n as f64);
    let pi = joint.sum_axis(1, false)?;
    let pj = joint.sum_axis(0, false)?;
    let mi = plogp_sum(&joint).sub(&plogp_sum(&pi))?.sub(&plogp_sum(&pj))?;
    Ok(mi.neg())
}

/// Sum over spatial axes of the mean (over channels and valid voxels)
/// squared forward difference. A unit ramp in one of the `d` channels
/// along one axis gives `1/d`.
pub fn diffusion_reg<T: Element>(u: &Var<T>) -> Result<Var<T>> {
    let shape = u.shape();
    let mut total: Option<Var<T>> = None;
    for ax in 1..shape.len() {
        let n = shape[ax];
        if n < 2 {
            continue;
        }
        let diff = u.narrow(ax, 1, n - 1)?.sub(&u.narrow(ax, 0, n - 1)?)?;
        let term = diff.square().mean();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Var::constant(Tensor::scalar(T::zero()))))
}

pub fn mse_loss<T: Element>(fixed: &Var<T>, warped: &Var<T>) -> Result<Var<T>> {
    same_shape("mse_loss", fixed, warped)?;
    Ok(fixed.sub(warped)?.square().mean())
}

/// `1 − mean_k (2Σ A_k B_k + ε) / (Σ A_k + Σ B_k + ε)` over label channels `k`.
pub fn dice_loss<T: Element>(fixed_labels: &Var<T>, warped_labels: &Var<T>) -> Result<Var<T>> {
    if fixed_labels.shape() != warped_labels.shape() {
        return Err(VfaError::dimension(
            "dice_loss",
            format!(
                "label maps {:?} vs {:?} (class count or extents differ)",
                fixed_labels.shape(),
                warped_labels.shape()
            ),
        ));
    }
    let k = fixed_labels.shape()[0];
    let a = fixed_labels.reshape([k, fixed_labels.numel() / k])?;
    let b = warped_labels.reshape([k, warped_labels.numel() / k])?;
    let inter = a.mul(&b)?.sum_axis(1, false)?.scale(2.0).add_scalar(DICE_EPS);
    let denom = a.sum_axis(1, false)?.add(&b.sum_axis(1, false)?)?.add_scalar(DICE_EPS);
    Ok(inter.div(&denom)?.mean().neg().add_scalar(1.0))
}

/// Mean physical distance between `φ(p_fixed)` and `p_moving`, with `φ`
/// linearly interpolated at the fixed keypoints.
pub fn tre_loss<T: Element>(phi: &TransformGrid<T>, kp: &KeypointSet) -> Result<Var<T>> {
    let d = phi.ndim();
    if kp.ndim() != d {
        return Err(VfaError::dimension("tre_loss", format!("{}-D keypoints vs {d}-D transform", kp.ndim())));
    }
    if kp.is_empty() {
        return Err(VfaError::Input("TRE needs at least one keypoint".into()));
    }
    let bad = kp.outside(phi.dims());
    if !bad.is_empty() {
        return Err(VfaError::Input(format!("keypoints outside the fixed image domain: {bad:?}")));
    }
    let np = kp.len();
    let pf = Tensor::from_fn([d, np], |i| T::of(kp.fixed[i[1]][i[0]]));
    let pm = Tensor::from_fn([d, np], |i| T::of(kp.moving[i[1]][i[0]]));
    let u = vfa_tensor::grid_sample(phi.disp_var(), &Var::constant(pf.clone()))?;
    let spacing = Var::constant(Tensor::from_fn([d, 1], |i| T::of(kp.spacing[i[0]])));
    let offset = Var::constant(Tensor::new([d, np], pf.data().iter().zip(pm.data()).map(|(&a, &b)| a - b).collect())?);
    let err = u.add(&offset)?.mul(&spacing)?;
    Ok(err.norm_axis(0, false)?.mean())
}

/// Which loss a weighted term evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Ncc,
    Mi,
    Mse,
    Diffusion,
    Dice,
    Tre,
}

impl TermKind {
    pub fn name(self) -> &'static str {
        match self {
            TermKind::Ncc => "ncc",
            TermKind::Mi => "mi",
            TermKind::Mse => "mse",
            TermKind::Diffusion => "diffusion",
            TermKind::Dice => "dice",
            TermKind::Tre => "tre",
        }
    }

    pub fn needs_labels(self) -> bool {
        self == TermKind::Dice
    }

    pub fn needs_keypoints(self) -> bool {
        self == TermKind::Tre
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerm {
    pub kind: TermKind,
    pub weight: f64,
}

impl fmt::Display for WeightedTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind.name(), self.weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub terms: Vec<WeightedTerm>,
    pub ncc_window: usize,
    pub mi_bins: usize,
}

pub const PRESETS: [&str; 4] = ["t1-atlas", "multimodal", "weakly-sup", "semi-sup-tre"];

impl LossConfig {
    pub fn new(terms: &[(TermKind, f64)]) -> Self {
        LossConfig {
            terms: terms.iter().map(|&(kind, weight)| WeightedTerm { kind, weight }).collect(),
            ncc_window: 9,
            mi_bins: 32,
        }
    }

    /// Named recipes: `t1-atlas`, `multimodal`, `weakly-sup`, `semi-sup-tre`.
    pub fn preset(name: &str) -> Result<Self> {
        use TermKind::*;
        Ok(match name {
            "t1-atlas" => Self::new(&[(Ncc, 1.0), (Diffusion, 1.0)]),
            "multimodal" => Self::new(&[(Mi, 1.0), (Diffusion, 0.2)]),
            "weakly-sup" => Self::new(&[(Mse, 1.0), (Diffusion, 0.05), (Dice, 1.0)]),
            "semi-sup-tre" => Self::new(&[(Mse, 5.0), (Diffusion, 0.2), (Tre, 0.05)]),
            other => {
                return Err(VfaError::Parameter(format!(
                    "unknown loss preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(VfaError::Parameter("loss has no terms".into()));
        }
        if let Some(t) = self.terms.iter().find(|t| !(t.weight >= 0.0) || !t.weight.is_finite()) {
            return Err(VfaError::Parameter(format!("loss weights must be nonnegative, got {t}")));
        }
        if self.ncc_window % 2 == 0 {
            return Err(VfaError::Parameter(format!("NCC window must be odd, got {}", self.ncc_window)));
        }
        if self.mi_bins < 2 {
            return Err(VfaError::Parameter(format!("MI needs at least 2 bins, got {}", self.mi_bins)));
        }
        Ok(())
    }

    pub fn needs_labels(&self) -> bool {
        self.terms.iter().any(|t| t.kind.needs_labels())
    }

    pub fn needs_keypoints(&self) -> bool {
        self.terms.iter().any(|t| t.kind.needs_keypoints())
    }

    /// Column labels, `kind@weight`, in term order.
    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(ToString::to_string).collect()
    }

    /// Weighted sum of all terms plus the unweighted value of each.
    pub fn evaluate<T: Element>(&self, inp: &LossInputs<'_, T>) -> Result<LossValue<T>> {
        let mut total: Option<Var<T>> = None;
        let mut values = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let v = match term.kind {
                TermKind::Ncc => ncc_loss(inp.fixed, inp.warped, self.ncc_window)?,
                TermKind::Mi => mi_loss(inp.fixed, inp.warped, self.mi_bins)?,
                TermKind::Mse => mse_loss(inp.fixed, inp.warped)?,
                TermKind::Diffusion => diffusion_reg(inp.phi.disp_var())?,
                TermKind::Dice => match (inp.fixed_labels, inp.warped_labels) {
                    (Some(a), Some(b)) => dice_loss(a, b)?,
                    _ => return Err(VfaError::Usage("the dice term needs label maps for both images".into())),
                },
                TermKind::Tre => match inp.keypoints {
                    Some(kp) => tre_loss(inp.phi, kp)?,
                    None => return Err(VfaError::Usage("the tre term needs keypoints".into())),
                },
            };
            values.push(v.item().as_f64());
            let weighted = v.scale(term.weight);
            total = Some(match total {
                Some(t) => t.add(&weighted)?,
                None => weighted,
            });
        }
        Ok(LossValue {
            total: total.ok_or_else(|| VfaError::Parameter("loss has no terms".into()))?,
            terms: values,
        })
    }
}

/// Everything a loss recipe may read.
pub struct LossInputs<'a, T: Element> {
    pub fixed: &'a Var<T>,
    pub warped: &'a Var<T>,
    pub phi: &'a TransformGrid<T>,
    /// One-hot fixed labels `[K, spatial..]`.
    pub fixed_labels: Option<&'a Var<T>>,
    /// Linearly warped one-hot moving labels `[K, spatial..]`.
    pub warped_labels: Option<&'a Var<T>>,
    pub keypoints: Option<&'a KeypointSet>,
}

#[derive(Debug, Clone)]
pub struct LossValue<T: Element> {
    pub total: Var<T>,
    /// Unweighted term values in recipe order.
    pub terms: Vec<f64>,
}
