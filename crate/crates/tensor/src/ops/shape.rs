use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::reduce::{check_axis, split_at_axis};
use crate::tensor::{numel, strides, Tensor};
use crate::var::Var;

impl<T: Element> Var<T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let value = self.value().reshape(shape)?;
        Ok(Var::from_op(value, vec![self.clone()], |g| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let shape = self.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::parameter(
                "permute",
                format!("{perm:?} is not a permutation of {nd} axes"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = Arc::new(permuted_offsets(&out_shape, &src_strides));
        let x = self.data();
        let data: Vec<T> = map.iter().map(|&o| x[o]).collect();
        let n = x.len();
        let value = Tensor::from_parts(out_shape, data);
        Ok(Var::from_op(value, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); n];
            for (&o, &gi) in map.iter().zip(g) {
                gx[o] = gi;
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<T>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(TensorError::parameter("transpose_last", "needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        check_axis("narrow", self.shape(), axis)?;
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::parameter(
                "narrow",
                format!("range {start}..{} outside extent {extent}", start + len),
            ));
        }
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = x.len();
        Ok(Var::from_op(Tensor::from_parts(shape, data), vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Output element `i` is input element `index[i]` (flat offsets); the
    /// backward pass scatter-adds, so repeated indices are fine.
    pub fn gather(&self, index: Arc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let shape = shape.into();
        if numel(&shape) != index.len() {
            return Err(TensorError::dimension("gather", &shape, &[index.len()]));
        }
        let x = self.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(TensorError::parameter(
                "gather",
                format!("index {bad} out of range for {} elements", x.len()),
            ));
        }
        let data: Vec<T> = index.iter().map(|&i| x[i]).collect();
        let n = x.len();
        Ok(Var::from_op(Tensor::from_parts(shape, data), vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); n];
            for (&i, &gi) in index.iter().zip(g) {
                gx[i] = gx[i] + gi;
            }
            vec![Some(gx)]
        }))
    }
}

fn permuted_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Element>(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::parameter("concat", "no inputs"))?;
    check_axis("concat", first.shape(), axis)?;
    for p in &parts[1..] {
        let ok = p.shape().len() == first.shape().len()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::dimension("concat", first.shape(), p.shape()));
        }
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &len) in parts.iter().zip(&lens) {
            data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Var::from_op(Tensor::from_parts(shape, data), parts.to_vec(), move |g| {
        let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        let mut at = 0;
        for _ in 0..outer {
            for (gp, &len) in grads.iter_mut().zip(&lens) {
                gp.extend_from_slice(&g[at..at + len * inner]);
                at += len * inner;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Var<f64> {
        let n = numel(shape);
        Var::param(Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap())
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = ramp(&[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(y.value().get(&[a, b, c]), x.value().get(&[b, c, a]));
                }
            }
        }
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let x = ramp(&[2, 5, 3]);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        let y = concat(&[a, b], 1).unwrap();
        assert_eq!(y.data(), x.data());
        y.scale(2.0).sum().backward().unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn gather_scatter_adds() {
        let x = ramp(&[3]);
        let y = x.gather(Arc::new(vec![0, 0, 2, 1, 0]), [5]).unwrap();
        assert_eq!(y.data(), &[0., 0., 2., 1., 0.]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3., 1., 1.]);
    }

    #[test]
    fn bad_permutation_rejected() {
        assert!(ramp(&[2, 2]).permute(&[0, 0]).is_err());
    }
}
