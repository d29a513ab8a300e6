//! Parameter-free feature matching and location retrieval.
//!
//! For every voxel `x`, the fixed feature `F(x)` (a query) is compared
//! with the moving features `M(x + k)` of the `w^d` candidates `k` in a
//! local window (the keys). A softmax over the similarities gives an
//! attention map, and its weighted sum over a fixed value matrix `R`,
//! whose row `k` is an offset vector, gives a sub-voxel displacement.
//! The whole computation is `Softmax(QKᵀ / t)·R`.
//!
//! # Offset order and sign
//!
//! Candidates are enumerated lexicographically over `k ∈ {−r..r}^d`
//! (first spatial axis slowest), `r = (w − 1) / 2`. Candidate `k`
//! reads `M(x + k)` and is paired with the row `+k` of the
//! [`ValueMatrix::retrieval`] matrix. With warping defined as
//! `I_w(x) = I_m(φ(x))`, this makes `φ(x) = x + u(x)` point at the
//! matched moving location, so warping `M` by the result reproduces `F`.
//! The radially inward matrix (`−k` rows) is available from
//! [`ValueMatrix::radial`] for inspection.

use std::sync::Arc;

use vfa_tensor::{matmul, softmax, Element, Tensor, Var};

use crate::error::{Result, VfaError};
use crate::geometry::DisplacementField;

/// Softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    /// `√C`, with `C` the per-voxel key length (feature channels).
    SqrtDk,
    Fixed(f64),
}

impl Temperature {
    pub fn resolve(self, channels: usize) -> f64 {
        match self {
            Temperature::SqrtDk => (channels as f64).sqrt(),
            Temperature::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    InnerProduct,
    /// Inner product of per-voxel L2-normalised features.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub temperature: Temperature,
    pub similarity: Similarity,
    /// Odd window extent per axis.
    pub window: usize,
    /// Diagnostic hook: replaces the attention map by a one-hot map on
    /// this candidate index at every voxel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_candidate: Option<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            temperature: Temperature::SqrtDk,
            similarity: Similarity::InnerProduct,
            window: 3,
            force_candidate: None,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(VfaError::Parameter(format!(
                "attention window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if let Temperature::Fixed(t) = self.temperature {
            if !(t > 0.0) || !t.is_finite() {
                return Err(VfaError::Parameter(format!("temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// Windows wider than 3 were never part of the evaluated configuration.
    pub fn is_beyond_evaluated(&self) -> bool {
        self.window > 3
    }
}

/// Window offsets in candidate order.
pub fn window_offsets(ndim: usize, window: usize) -> Vec<Vec<isize>> {
    let r = (window / 2) as isize;
    let count = window.pow(ndim as u32);
    (0..count)
        .map(|mut n| {
            let mut k = vec![0isize; ndim];
            for ax in (0..ndim).rev() {
                k[ax] = (n % window) as isize - r;
                n /= window;
            }
            k
        })
        .collect()
}

/// The fixed value matrix, one row per window candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrix {
    pub ndim: usize,
    pub window: usize,
    pub rows: Vec<Vec<f64>>,
}

impl ValueMatrix {
    /// Row `k` is `+k`: the displacement from `x` to candidate `x + k`.
    pub fn retrieval(ndim: usize, window: usize) -> Self {
        let rows = window_offsets(ndim, window)
            .into_iter()
            .map(|k| k.into_iter().map(|v| v as f64).collect())
            .collect();
        ValueMatrix { ndim, window, rows }
    }

    /// Row `k` is `−k`, the radially inward field of the literal formula.
    pub fn radial(ndim: usize, window: usize) -> Self {
        let mut m = Self::retrieval(ndim, window);
        for row in &mut m.rows {
            for v in row.iter_mut() {
                *v = 0.0 - *v;
            }
        }
        m
    }

    pub fn candidates(&self) -> usize {
        self.rows.len()
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        Tensor::from_f64([self.rows.len(), self.ndim], &flat).expect("value matrix shape")
    }
}

/// Gathers the `w^d` candidate feature rows around every voxel:
/// `[C, spatial..] → [N, w^d, C]`, with replicate padding at the border.
pub fn extract_windows<T: Element>(m: &Var<T>, window: usize) -> Result<Var<T>> {
    if window % 2 == 0 || window == 0 {
        return Err(VfaError::Parameter(format!("window must be odd, got {window}")));
    }
    let shape = m.shape();
    if shape.len() < 2 {
        return Err(VfaError::dimension("extract_windows", format!("expected [C, spatial..], got {shape:?}")));
    }
    let channels = shape[0];
    let dims = &shape[1..];
    let d = dims.len();
    let n: usize = dims.iter().product();
    let offsets = window_offsets(d, window);
    let k = offsets.len();
    let strides = vfa_tensor::strides(dims);

    let mut index = Vec::with_capacity(n * k * channels);
    let mut pos = vec![0usize; d];
    for _ in 0..n {
        for off in &offsets {
            let mut flat = 0usize;
            for ax in 0..d {
                let q = (pos[ax] as isize + off[ax]).clamp(0, dims[ax] as isize - 1) as usize;
                flat += q * strides[ax];
            }
            for c in 0..channels {
                index.push(c * n + flat);
            }
        }
        for ax in (0..d).rev() {
            pos[ax] += 1;
            if pos[ax] < dims[ax] {
                break;
            }
            pos[ax] = 0;
        }
    }
    Ok(m.gather(Arc::new(index), [n, k, channels])?)
}

/// Output of [`vfa_attention`].
#[derive(Debug, Clone)]
pub struct Attention<T: Element> {
    pub displacement: DisplacementField<T>,
    /// Attention map, `[N, w^d]`.
    pub weights: Var<T>,
    pub temperature: f64,
}

fn l2_normalise<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    let norm = x.norm_axis(0, true)?.add_scalar(1e-12);
    Ok(x.div(&norm)?)
}

/// `Softmax(QKᵀ / t)·R` over a sliding window, returning a `d`-channel displacement field.
pub fn vfa_attention<T: Element>(f: &Var<T>, m: &Var<T>, cfg: &AttentionConfig) -> Result<Attention<T>> {
    cfg.validate()?;
    if f.shape() != m.shape() {
        return Err(VfaError::dimension(
            "vfa_attention",
            format!("fixed features {:?} vs moving features {:?}", f.shape(), m.shape()),
        ));
    }
    let shape = f.shape();
    if !(3..=4).contains(&shape.len()) {
        return Err(VfaError::dimension("vfa_attention", format!("expected [C, spatial..] with 2 or 3 spatial axes, got {shape:?}")));
    }
    let channels = shape[0];
    let dims = shape[1..].to_vec();
    let d = dims.len();
    let n: usize = dims.iter().product();
    let values = ValueMatrix::retrieval(d, cfg.window);
    let k = values.candidates();
    let t = cfg.temperature.resolve(channels);

    let weights = match cfg.force_candidate {
        Some(idx) => {
            if idx >= k {
                return Err(VfaError::Parameter(format!("forced candidate {idx} outside 0..{k}")));
            }
            Var::constant(Tensor::from_fn([n, 1, k], |i| if i[2] == idx { T::one() } else { T::zero() }))
        }
        None => {
            let (f, m) = match cfg.similarity {
                Similarity::InnerProduct => (f.clone(), m.clone()),
                Similarity::Cosine => (l2_normalise(f)?, l2_normalise(m)?),
            };
            let q = f.reshape([channels, n])?.permute(&[1, 0])?.reshape([n, 1, channels])?;
            let keys = extract_windows(&m, cfg.window)?;
            let scores = matmul(&q, &keys.transpose_last()?)?;
            softmax(&scores, 2, t)?
        }
    };
    let r = Var::constant(values.to_tensor::<T>());
    let u = matmul(&weights, &r)?.reshape([n, d])?.permute(&[1, 0])?;
    let mut field_shape = vec![d];
    field_shape.extend_from_slice(&dims);
    Ok(Attention {
        displacement: DisplacementField::new(u.reshape(field_shape)?)?,
        weights: weights.reshape([n, k])?,
        temperature: t,
    })
}

/// Mean over voxels of the largest attention weight; 1 for one-hot maps,
/// `1 / w^d` for uniform maps.
pub fn sparsity<T: Element>(weights: &Tensor<T>) -> Result<f64> {
    let shape = weights.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(VfaError::dimension("sparsity", format!("expected [N, K], got {shape:?}")));
    }
    let k = shape[1];
    let mut total = 0.0;
    for (row_idx, row) in weights.data().chunks(k).enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(VfaError::Input(format!(
                "attention row {row_idx} is not a distribution (sum {sum})"
            )));
        }
        total += row.iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
    }
    Ok(total / shape[0] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_matrix_invariants() {
        for (d, rows) in [(2, 9), (3, 27)] {
            let r = ValueMatrix::retrieval(d, 3);
            assert_eq!(r.candidates(), rows);
            let centre = &r.rows[rows / 2];
            assert!(centre.iter().all(|&v| v == 0.0));
            let offs = window_offsets(d, 3);
            for (row, k) in r.rows.iter().zip(&offs) {
                let nr: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nk: f64 = k.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
                assert_eq!(nr, nk);
            }
            for ax in 0..d {
                assert_eq!(r.rows.iter().map(|row| row[ax]).sum::<f64>(), 0.0);
            }
            let radial = ValueMatrix::radial(d, 3);
            for (a, b) in radial.rows.iter().zip(&r.rows) {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(*x, -*y);
                }
            }
        }
    }

    #[test]
    fn offsets_are_lexicographic() {
        let o = window_offsets(2, 3);
        assert_eq!(o[0], vec![-1, -1]);
        assert_eq!(o[1], vec![-1, 0]);
        assert_eq!(o[3], vec![0, -1]);
        assert_eq!(o[8], vec![1, 1]);
    }

    #[test]
    fn windows_of_constant_map() {
        let m = Var::constant(Tensor::<f64>::full([2, 4, 4], 0.7));
        let k = extract_windows(&m, 3).unwrap();
        assert_eq!(k.shape(), &[16, 9, 2]);
        assert!(k.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn windows_reproduce_neighbours_in_order() {
        let m = Var::constant(Tensor::<f64>::from_fn([1, 5, 5], |i| (i[1] * 10 + i[2]) as f64));
        let k = extract_windows(&m, 3).unwrap();
        // interior voxel (2, 3) is row 13
        let row: Vec<f64> = (0..9).map(|c| k.value().get(&[13, c, 0])).collect();
        assert_eq!(row, vec![12., 13., 14., 22., 23., 24., 32., 33., 34.]);
        // corner (0, 0) replicates
        let row: Vec<f64> = (0..9).map(|c| k.value().get(&[0, c, 0])).collect();
        assert_eq!(row, vec![0., 0., 1., 0., 0., 1., 10., 10., 11.]);
    }

    #[test]
    fn windows_3d_layout() {
        let m = Var::constant(Tensor::<f32>::zeros([16, 8, 8, 8]));
        assert_eq!(extract_windows(&m, 3).unwrap().shape(), &[512, 27, 16]);
    }

    #[test]
    fn even_window_rejected() {
        let m = Var::constant(Tensor::<f64>::zeros([1, 4, 4]));
        assert!(matches!(extract_windows(&m, 2), Err(VfaError::Parameter(_))));
        let cfg = AttentionConfig { window: 4, ..Default::default() };
        assert!(vfa_attention(&m, &m, &cfg).is_err());
    }

    #[test]
    fn uniform_features_give_zero_displacement() {
        let f = Var::constant(Tensor::<f64>::full([3, 6, 6], 0.4));
        let a = vfa_attention(&f, &f, &AttentionConfig::default()).unwrap();
        assert!(a.displacement.var().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn forced_candidate_selects_one_row() {
        let f = Var::constant(Tensor::<f64>::zeros([2, 4, 4]));
        let cfg = AttentionConfig { force_candidate: Some(0), ..Default::default() };
        let a = vfa_attention(&f, &f, &cfg).unwrap();
        assert!(a.displacement.var().data().iter().all(|&v| v == -1.0));
        assert_eq!(sparsity(a.weights.value()).unwrap(), 1.0);
    }

    #[test]
    fn sparsity_examples() {
        let one_hot = Tensor::<f64>::from_fn([5, 27], |i| if i[1] == 3 { 1.0 } else { 0.0 });
        assert_eq!(sparsity(&one_hot).unwrap(), 1.0);
        let uniform = Tensor::<f64>::full([5, 27], 1.0 / 27.0);
        assert!((sparsity(&uniform).unwrap() - 1.0 / 27.0).abs() < 1e-15);
        let bad = Tensor::<f64>::full([2, 3], 0.5);
        assert!(matches!(sparsity(&bad), Err(VfaError::Input(_))));
    }
}
