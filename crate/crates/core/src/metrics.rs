//! Evaluation metrics for transforms and label overlap.
//!
//! Everything here runs in f64 on plain data and is not differentiable.
//!
//! Conventions:
//! * Jacobians use central differences of the displacement plus the
//!   identity, on interior voxels only (every axis index in `1..n−1`).
//!   Percentages of folded voxels are relative to the interior count.
//! * Folded volume splits every grid cell into `d!` Kuhn simplices (one
//!   per axis permutation, walking from the lowest corner along the
//!   permuted unit steps) and sums the magnitudes of negative signed
//!   simplex volumes, in voxel units. Percentages are relative to the
//!   number of cells.
//! * HD95 pools the boundary-to-boundary nearest distances of both
//!   directions and takes the nearest-rank percentile: the
//!   `⌈0.95·n⌉`-th smallest. A boundary voxel is a foreground voxel with
//!   at least one background face neighbour; outside the image counts
//!   as background.
//! * SDLogJ is the population standard deviation of `ln(max(det, 1e-6))`.

use std::collections::BTreeSet;
use std::io::Write;

use vfa_tensor::{grid_sample, strides, Element, Tensor, Var};

use crate::error::{Result, VfaError};
use crate::geometry::{KeypointSet, TransformGrid};

pub const LOG_JAC_FLOOR: f64 = 1e-6;

/// Integer class per voxel; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: Vec<usize>,
    pub data: Vec<i32>,
}

impl LabelMap {
    pub fn new(dims: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() || n == 0 {
            return Err(VfaError::Input(format!(
                "label map with extents {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v < 0) {
            return Err(VfaError::Input(format!("label values must be nonnegative, found {v}")));
        }
        Ok(LabelMap { dims, data })
    }

    /// Sorted foreground classes present in the map.
    pub fn classes(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        set.into_iter().collect()
    }

    /// `[K, spatial..]` indicator channels, one per entry of `classes`.
    pub fn one_hot<T: Element>(&self, classes: &[i32]) -> Tensor<T> {
        let mut shape = vec![classes.len()];
        shape.extend_from_slice(&self.dims);
        let n = self.data.len();
        let mut out = vec![T::zero(); classes.len() * n];
        for (k, &c) in classes.iter().enumerate() {
            for (p, &v) in self.data.iter().enumerate() {
                if v == c {
                    out[k * n + p] = T::one();
                }
            }
        }
        Tensor::new(shape, out).expect("one-hot shape")
    }
}

fn check_same_dims(op: &'static str, a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims != b.dims {
        return Err(VfaError::dimension(op, format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    /// `(class, score)` for every class present in either map.
    pub per_class: Vec<(i32, f64)>,
    /// `None` when neither map has a foreground class.
    pub mean: Option<f64>,
}

/// Per-class `2|A∩B| / (|A| + |B|)`.
pub fn dice_score(a: &LabelMap, b: &LabelMap) -> Result<DiceReport> {
    check_same_dims("dice_score", a, b)?;
    let classes: BTreeSet<i32> = a.classes().into_iter().chain(b.classes()).collect();
    let per_class: Vec<(i32, f64)> = classes
        .into_iter()
        .map(|c| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.data.iter().zip(&b.data) {
                na += (x == c) as usize;
                nb += (y == c) as usize;
                both += (x == c && y == c) as usize;
            }
            (c, 2.0 * both as f64 / (na + nb) as f64)
        })
        .collect();
    let mean = (!per_class.is_empty()).then(|| per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64);
    Ok(DiceReport { per_class, mean })
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for ax in (0..dims.len()).rev() {
        idx[ax] = flat % dims[ax];
        flat /= dims[ax];
    }
    idx
}

/// Voxel indices of the boundary of `class`.
pub fn boundary_voxels(map: &LabelMap, class: i32) -> Vec<Vec<usize>> {
    let st = strides(&map.dims);
    let mut out = Vec::new();
    for (p, &v) in map.data.iter().enumerate() {
        if v != class {
            continue;
        }
        let idx = unravel(p, &map.dims);
        let edge = (0..map.dims.len()).any(|ax| {
            idx[ax] == 0
                || idx[ax] + 1 == map.dims[ax]
                || map.data[p - st[ax]] != class
                || map.data[p + st[ax]] != class
        });
        if edge {
            out.push(idx);
        }
    }
    out
}

fn nearest(from: &[Vec<usize>], to: &[Vec<usize>], spacing: &[f64]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    p.iter()
                        .zip(q)
                        .zip(spacing)
                        .map(|((&a, &b), &s)| ((a as f64 - b as f64) * s).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Nearest-rank percentile (`q` in (0, 1]) of an unsorted sample.
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// 95th percentile symmetric boundary distance in millimetres; `None`
/// when `class` is missing from either map.
pub fn hd95(a: &LabelMap, b: &LabelMap, class: i32, spacing: &[f64]) -> Result<Option<f64>> {
    check_same_dims("hd95", a, b)?;
    if spacing.len() != a.dims.len() {
        return Err(VfaError::dimension("hd95", format!("spacing {spacing:?} for extents {:?}", a.dims)));
    }
    let ba = boundary_voxels(a, class);
    let bb = boundary_voxels(b, class);
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    let mut d = nearest(&ba, &bb, spacing);
    d.extend(nearest(&bb, &ba, spacing));
    Ok(Some(nearest_rank(&mut d, 0.95)))
}

/// Central-difference Jacobian determinants on the interior grid.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    /// Interior extents (`n − 2` per axis).
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

fn det(m: &[f64], d: usize) -> f64 {
    match d {
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => unreachable!("only 2D and 3D transforms exist"),
    }
}

fn disp_f64<T: Element>(phi: &TransformGrid<T>) -> Vec<f64> {
    phi.disp_var().data().iter().map(|v| v.as_f64()).collect()
}

pub fn jacobian_determinant<T: Element>(phi: &TransformGrid<T>) -> Result<JacobianField> {
    let dims = phi.dims().to_vec();
    let d = dims.len();
    if dims.iter().any(|&n| n < 3) {
        return Err(VfaError::Input(format!("Jacobian needs at least 3 voxels per axis, got {dims:?}")));
    }
    let u = disp_f64(phi);
    let n: usize = dims.iter().product();
    let st = strides(&dims);
    let inner: Vec<usize> = dims.iter().map(|&e| e - 2).collect();
    let count: usize = inner.iter().product();
    let mut values = Vec::with_capacity(count);
    let mut m = vec![0.0; d * d];
    for q in 0..count {
        let idx = unravel(q, &inner);
        let p: usize = idx.iter().zip(&st).map(|(&i, &s)| (i + 1) * s).sum();
        for i in 0..d {
            for j in 0..d {
                let du = (u[i * n + p + st[j]] - u[i * n + p - st[j]]) / 2.0;
                m[i * d + j] = du + if i == j { 1.0 } else { 0.0 };
            }
        }
        values.push(det(&m, d));
    }
    Ok(JacobianField { dims: inner, values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldCount {
    pub count: usize,
    pub total: usize,
    pub percent: f64,
}

/// Interior voxels with `det J ≤ 0`.
pub fn nd_voxels<T: Element>(phi: &TransformGrid<T>) -> Result<FoldCount> {
    let jac = jacobian_determinant(phi)?;
    let count = jac.values.iter().filter(|&&v| v <= 0.0).count();
    let total = jac.values.len();
    Ok(FoldCount {
        count,
        total,
        percent: 100.0 * count as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldVolume {
    /// Folded volume in voxel units.
    pub volume: f64,
    /// Domain volume (number of grid cells).
    pub total: f64,
    pub percent: f64,
}

fn permutations(d: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..d).collect();
    fn rec(k: usize, p: &mut Vec<usize>, sign: f64, out: &mut Vec<(Vec<usize>, f64)>) {
        if k == p.len() {
            out.push((p.clone(), sign));
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            rec(k + 1, p, if i == k { sign } else { -sign }, out);
            p.swap(k, i);
        }
    }
    rec(0, &mut p, 1.0, &mut out);
    out
}

/// Sum of negative Kuhn-simplex volumes of the transformed grid.
pub fn nd_volume<T: Element>(phi: &TransformGrid<T>) -> Result<FoldVolume> {
    let dims = phi.dims().to_vec();
    let d = dims.len();
    if dims.iter().any(|&n| n < 2) {
        return Err(VfaError::Input(format!("folded volume needs at least 2 voxels per axis, got {dims:?}")));
    }
    let coords = phi.coords_f64();
    let n: usize = dims.iter().product();
    let st = strides(&dims);
    let cells: Vec<usize> = dims.iter().map(|&e| e - 1).collect();
    let ncells: usize = cells.iter().product();
    let perms = permutations(d);
    let fact: f64 = (1..=d).map(|k| k as f64).product();
    let mut folded = 0.0;
    let mut m = vec![0.0; d * d];
    for c in 0..ncells {
        let base: usize = unravel(c, &cells).iter().zip(&st).map(|(&i, &s)| i * s).sum();
        for (perm, sign) in &perms {
            let mut prev = base;
            for (col, &ax) in perm.iter().enumerate() {
                let next = prev + st[ax];
                for row in 0..d {
                    m[row * d + col] = coords[row * n + next] - coords[row * n + prev];
                }
                prev = next;
            }
            let vol = sign * det(&m, d) / fact;
            if vol < 0.0 {
                folded -= vol;
            }
        }
    }
    let total = ncells as f64;
    Ok(FoldVolume {
        volume: folded,
        total,
        percent: 100.0 * folded / total,
    })
}

/// Standard deviation of the clamped log Jacobian determinant.
pub fn sdlogj<T: Element>(phi: &TransformGrid<T>) -> Result<f64> {
    let jac = jacobian_determinant(phi)?;
    let logs: Vec<f64> = jac.values.iter().map(|&v| v.max(LOG_JAC_FLOOR).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    Ok((logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreReport {
    /// Millimetres, one per keypoint pair.
    pub per_point: Vec<f64>,
    pub mean: f64,
}

/// Distances between `φ(fixed)` and `moving`, spacing-scaled.
pub fn tre<T: Element>(phi: &TransformGrid<T>, kp: &KeypointSet) -> Result<TreReport> {
    let d = phi.ndim();
    if kp.ndim() != d {
        return Err(VfaError::dimension("tre", format!("{}-D keypoints vs {d}-D transform", kp.ndim())));
    }
    if kp.is_empty() {
        return Err(VfaError::Input("TRE needs at least one keypoint".into()));
    }
    let bad = kp.outside(phi.dims());
    if !bad.is_empty() {
        return Err(VfaError::Input(format!("keypoints outside the fixed image domain: {bad:?}")));
    }
    let np = kp.len();
    let mut disp_shape = vec![d];
    disp_shape.extend_from_slice(phi.dims());
    let u = Var::constant(Tensor::new(disp_shape, disp_f64(phi))?);
    let pts = Var::constant(Tensor::from_fn([d, np], |i| kp.fixed[i[1]][i[0]]));
    let at = grid_sample(&u, &pts)?;
    let per_point: Vec<f64> = (0..np)
        .map(|p| {
            (0..d)
                .map(|j| {
                    let mapped = kp.fixed[p][j] + at.data()[j * np + p];
                    ((mapped - kp.moving[p][j]) * kp.spacing[j]).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mean = per_point.iter().sum::<f64>() / np as f64;
    Ok(TreReport { per_point, mean })
}

/// Mean of the lowest `⌈0.3·n⌉` case means.
pub fn tre30(case_means: &[f64]) -> Result<f64> {
    if case_means.is_empty() {
        return Err(VfaError::Usage("TRE30 needs at least one case".into()));
    }
    let mut v = case_means.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((0.3 * v.len() as f64).ceil() as usize).max(1);
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// Nearest-neighbour resampling of a label map at `φ`. Coordinates are
/// clamped to the domain and rounded half away from zero.
pub fn warp_labels_nearest<T: Element>(labels: &LabelMap, phi: &TransformGrid<T>) -> Result<LabelMap> {
    let d = labels.dims.len();
    if phi.ndim() != d {
        return Err(VfaError::dimension("warp_labels", format!("{d}-D labels vs {}-D transform", phi.ndim())));
    }
    let coords = phi.coords_f64();
    let out_dims = phi.dims().to_vec();
    let n: usize = out_dims.iter().product();
    let st = strides(&labels.dims);
    let data = (0..n)
        .map(|p| {
            let src: usize = (0..d)
                .map(|j| {
                    let top = (labels.dims[j] - 1) as f64;
                    coords[j * n + p].clamp(0.0, top).round() as usize * st[j]
                })
                .sum();
            labels.data[src]
        })
        .collect();
    LabelMap::new(out_dims, data)
}

/// One evaluated case. Missing inputs leave fields empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaseMetrics {
    pub case: String,
    pub dsc: Option<f64>,
    pub hd95: Option<f64>,
    pub nd_voxels: Option<usize>,
    pub nd_voxels_pct: Option<f64>,
    pub nd_volume: Option<f64>,
    pub nd_volume_pct: Option<f64>,
    pub sdlogj: Option<f64>,
    pub tre: Option<f64>,
}

pub const METRICS_HEADER: &str = "case,dsc,hd95,nd_voxels,nd_voxels_pct,nd_volume,nd_volume_pct,sdlogj,tre,tre30";

/// Computes every metric the inputs allow.
pub fn evaluate_case<T: Element>(
    case: &str,
    phi: &TransformGrid<T>,
    labels: Option<(&LabelMap, &LabelMap)>,
    keypoints: Option<&KeypointSet>,
    spacing: &[f64],
) -> Result<CaseMetrics> {
    let mut m = CaseMetrics {
        case: case.to_string(),
        ..Default::default()
    };
    if phi.dims().iter().all(|&n| n >= 3) {
        let nv = nd_voxels(phi)?;
        let vol = nd_volume(phi)?;
        m.nd_voxels = Some(nv.count);
        m.nd_voxels_pct = Some(nv.percent);
        m.nd_volume = Some(vol.volume);
        m.nd_volume_pct = Some(vol.percent);
        m.sdlogj = Some(sdlogj(phi)?);
    }
    if let Some((fixed, moving)) = labels {
        let warped = warp_labels_nearest(moving, phi)?;
        let dice = dice_score(fixed, &warped)?;
        m.dsc = dice.mean;
        let mut hs = Vec::new();
        for (c, _) in &dice.per_class {
            if let Some(h) = hd95(fixed, &warped, *c, spacing)? {
                hs.push(h);
            }
        }
        m.hd95 = (!hs.is_empty()).then(|| hs.iter().sum::<f64>() / hs.len() as f64);
    }
    if let Some(kp) = keypoints {
        m.tre = Some(tre(phi, kp)?.mean);
    }
    Ok(m)
}

fn cell<V: ToString>(v: Option<V>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_of<I: Iterator<Item = Option<f64>>>(it: I) -> Option<f64> {
    let v: Vec<f64> = it.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Writes the per-case rows and a final `mean` row; `tre30` is only
/// filled on the `mean` row.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[CaseMetrics]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},",
            r.case,
            cell(r.dsc),
            cell(r.hd95),
            cell(r.nd_voxels),
            cell(r.nd_voxels_pct),
            cell(r.nd_volume),
            cell(r.nd_volume_pct),
            cell(r.sdlogj),
            cell(r.tre)
        )?;
    }
    let tres: Vec<f64> = rows.iter().filter_map(|r| r.tre).collect();
    writeln!(
        w,
        "mean,{},{},{},{},{},{},{},{},{}",
        cell(mean_of(rows.iter().map(|r| r.dsc))),
        cell(mean_of(rows.iter().map(|r| r.hd95))),
        cell(mean_of(rows.iter().map(|r| r.nd_voxels.map(|v| v as f64)))),
        cell(mean_of(rows.iter().map(|r| r.nd_voxels_pct))),
        cell(mean_of(rows.iter().map(|r| r.nd_volume))),
        cell(mean_of(rows.iter().map(|r| r.nd_volume_pct))),
        cell(mean_of(rows.iter().map(|r| r.sdlogj))),
        cell(mean_of(tres.iter().map(|&t| Some(t)))),
        cell(tre30(&tres).ok())
    )
}
