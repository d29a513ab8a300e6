//! Factor-two resolution changes over the spatial axes (every axis after the first).
//!
//! Grid convention: voxel `i` covers the cell `[i, i + 1)` and its value
//! lives at the cell centre. A coarse voxel `j` therefore spans fine
//! voxels `2j` and `2j + 1`, and fine voxel `i` sits at coarse coordinate
//! `(i + 0.5) / 2 − 0.5`.
//!
//! * [`Var::downsample2`] averages each pair: `out[j] = (x[2j] + x[2j+1]) / 2`.
//!   An odd trailing voxel is dropped.
//! * [`Var::upsample2`] interpolates linearly at the fine coordinates above,
//!   clamping to the first/last sample outside the coarse range:
//!   `out[0] = x[0]`, `out[2j] = ¼x[j−1] + ¾x[j]`,
//!   `out[2j+1] = ¾x[j] + ¼x[j+1]`, `out[2n−1] = x[n−1]`.
//!
//! Both are applied separably, axis by axis in increasing order.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::reduce::split_at_axis;
use crate::tensor::Tensor;
use crate::var::Var;

/// Two (source index, weight) taps per output sample.
type Taps = Vec<[(usize, f64); 2]>;

fn down_taps(n: usize) -> Taps {
    (0..n / 2).map(|j| [(2 * j, 0.5), (2 * j + 1, 0.5)]).collect()
}

fn up_taps(n: usize) -> Taps {
    let mut taps = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let f = src - i0 as f64;
        taps.push([(i0, 1.0 - f), (i1, f)]);
    }
    taps
}

fn resample_axis<T: Element>(x: &Var<T>, axis: usize, taps: Taps) -> Var<T> {
    let (outer, n_in, inner) = split_at_axis(x.shape(), axis);
    let n_out = taps.len();
    let taps: Arc<Vec<[(usize, T); 2]>> = Arc::new(
        taps.into_iter()
            .map(|[(a, wa), (b, wb)]| [(a, T::of(wa)), (b, T::of(wb))])
            .collect(),
    );
    let xd = x.data();
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        for (j, &[(a, wa), (b, wb)]) in taps.iter().enumerate() {
            let dst = (o * n_out + j) * inner;
            let sa = (o * n_in + a) * inner;
            let sb = (o * n_in + b) * inner;
            for i in 0..inner {
                out[dst + i] = wa * xd[sa + i] + wb * xd[sb + i];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = n_out;
    Var::from_op(Tensor::from_parts(shape, out), vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); outer * n_in * inner];
        for o in 0..outer {
            for (j, &[(a, wa), (b, wb)]) in taps.iter().enumerate() {
                let src = (o * n_out + j) * inner;
                let da = (o * n_in + a) * inner;
                let db = (o * n_in + b) * inner;
                for i in 0..inner {
                    gx[da + i] = gx[da + i] + wa * g[src + i];
                    gx[db + i] = gx[db + i] + wb * g[src + i];
                }
            }
        }
        vec![Some(gx)]
    })
}

impl<T: Element> Var<T> {
    /// Factor-two average pooling over every spatial axis.
    pub fn downsample2(&self) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() < 2 || shape[1..].iter().any(|&n| n < 2) {
            return Err(TensorError::parameter(
                "downsample2",
                format!("spatial extents must be at least 2, got {shape:?}"),
            ));
        }
        let mut y = self.clone();
        for axis in 1..shape.len() {
            let n = y.shape()[axis];
            y = resample_axis(&y, axis, down_taps(n));
        }
        Ok(y)
    }

    /// Factor-two linear upsampling over every spatial axis (cell-centred, clamped).
    pub fn upsample2(&self) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(TensorError::parameter(
                "upsample2",
                format!("expected [C, spatial..], got {shape:?}"),
            ));
        }
        let mut y = self.clone();
        for axis in 1..shape.len() {
            let n = y.shape()[axis];
            y = resample_axis(&y, axis, up_taps(n));
        }
        Ok(y)
    }
}
