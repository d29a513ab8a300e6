use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::var::Var;

/// (outer, axis, inner) extents around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::parameter(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl<T: Element> Var<T> {
    /// Sum of all elements as a 0-d scalar.
    pub fn sum(&self) -> Var<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Var::from_op(Tensor::scalar(total), vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d = *d + v;
                }
            }
        }
        let value = Tensor::from_parts(reduced_shape(self.shape(), axis, keepdim), out);
        Ok(Var::from_op(value, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        check_axis("mean_axis", self.shape(), axis)?;
        let n = self.shape()[axis];
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64))
    }

    /// Euclidean norm along `axis`.
    ///
    /// The gradient at a zero vector is taken as zero rather than undefined.
    pub fn norm_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        check_axis("norm_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for k in 0..len {
                    let v = x[(o * len + k) * inner + i];
                    acc = acc + v * v;
                }
                out[o * inner + i] = acc.sqrt();
            }
        }
        let norms = out.clone();
        let value = Tensor::from_parts(reduced_shape(self.shape(), axis, keepdim), out);
        let xv = self.clone();
        Ok(Var::from_op(value, vec![self.clone()], move |g| {
            let x = xv.data();
            let mut gx = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let n = norms[o * inner + i];
                    if n == T::zero() {
                        continue;
                    }
                    let s = g[o * inner + i] / n;
                    for k in 0..len {
                        let at = (o * len + k) * inner + i;
                        gx[at] = x[at] * s;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}
