use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::elementwise::{broadcast_shape, broadcast_strides, for_each_broadcast};
use crate::ops::reduce::{check_axis, split_at_axis};
use crate::tensor::{numel, Tensor};
use crate::var::Var;

/// `c (+)= a · b` with explicit (row, col) strides on the operands.
///
/// Tiny products use a plain loop; matrixmultiply's packing overhead
/// dominates below a few hundred multiply-adds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    sb: (usize, usize),
    c: &mut [T],
    accumulate: bool,
) {
    if m * k * n <= 512 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc + a[i * sa.0 + p * sa.1] * b[p * sb.0 + j * sb.1];
                }
                let dst = &mut c[i * n + j];
                *dst = if accumulate { *dst + acc } else { acc };
            }
        }
    } else {
        T::gemm(
            m,
            k,
            n,
            a,
            (sa.0 as isize, sa.1 as isize),
            b,
            (sb.0 as isize, sb.1 as isize),
            c,
            accumulate,
        );
    }
}

/// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
/// broadcasting over the leading axes.
pub fn matmul<T: Element>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
        return Err(TensorError::dimension("matmul", sa, sb));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let batch = broadcast_shape("matmul", batch_a, batch_b)
        .map_err(|_| TensorError::dimension("matmul", sa, sb))?;
    let stride_a = broadcast_strides(batch_a, &batch);
    let stride_b = broadcast_strides(batch_b, &batch);
    let (mk, kn, mn) = (m * k, k * n, m * n);

    let mut out = vec![T::zero(); numel(&batch) * mn];
    {
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&batch, &stride_a, &stride_b, |i, oa, ob| {
            mm(
                m,
                k,
                n,
                &ad[oa * mk..(oa + 1) * mk],
                (k, 1),
                &bd[ob * kn..(ob + 1) * kn],
                (n, 1),
                &mut out[i * mn..(i + 1) * mn],
                false,
            );
        });
    }
    let mut shape = batch.clone();
    shape.extend([m, n]);

    let (ac, bc) = (a.clone(), b.clone());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    Ok(Var::from_op(Tensor::from_parts(shape, out), vec![a.clone(), b.clone()], move |g| {
        let (ad, bd) = (ac.data(), bc.data());
        let mut ga = need_a.then(|| vec![T::zero(); ad.len()]);
        let mut gb = need_b.then(|| vec![T::zero(); bd.len()]);
        for_each_broadcast(&batch, &stride_a, &stride_b, |i, oa, ob| {
            let gi = &g[i * mn..(i + 1) * mn];
            if let Some(ga) = ga.as_mut() {
                // dA = dC · Bᵀ
                mm(
                    m,
                    n,
                    k,
                    gi,
                    (n, 1),
                    &bd[ob * kn..(ob + 1) * kn],
                    (1, n),
                    &mut ga[oa * mk..(oa + 1) * mk],
                    true,
                );
            }
            if let Some(gb) = gb.as_mut() {
                // dB = Aᵀ · dC
                mm(
                    k,
                    m,
                    n,
                    &ad[oa * mk..(oa + 1) * mk],
                    (1, k),
                    gi,
                    (n, 1),
                    &mut gb[ob * kn..(ob + 1) * kn],
                    true,
                );
            }
        });
        vec![ga, gb]
    }))
}

/// `exp((x − max) / t)` normalised along `axis`.
pub fn softmax<T: Element>(x: &Var<T>, axis: usize, temperature: f64) -> Result<Var<T>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TensorError::parameter(
            "softmax",
            format!("temperature must be positive and finite, got {temperature}"),
        ));
    }
    check_axis("softmax", x.shape(), axis)?;
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let t = T::of(temperature);
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(xd[at(j)]);
            }
            let mut z = T::zero();
            for j in 0..len {
                let e = ((xd[at(j)] - mx) / t).exp();
                y[at(j)] = e;
                z = z + e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / z;
            }
        }
    }
    let probs = y.clone();
    Ok(Var::from_op(Tensor::from_parts(x.shape().to_vec(), y), vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); probs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut dot = T::zero();
                for j in 0..len {
                    dot = dot + g[at(j)] * probs[at(j)];
                }
                for j in 0..len {
                    gx[at(j)] = probs[at(j)] * (g[at(j)] - dot) / t;
                }
            }
        }
        vec![Some(gx)]
    }))
}
