//! Channel-first cross-correlation over 1, 2 or 3 spatial axes.
//!
//! Lowered to a single GEMM through an im2col buffer. Inputs are
//! `[C_in, spatial..]`, weights `[C_out, C_in, kernel..]`; out-of-range
//! taps read zero.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::linalg::mm;
use crate::tensor::Tensor;
use crate::var::Var;

/// Zero padding that keeps extents unchanged at stride 1.
pub fn same_padding(kernel: usize) -> usize {
    kernel / 2
}

#[derive(Clone, Copy)]
struct Geometry {
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    pad: [usize; 3],
    stride: usize,
}

impl Geometry {
    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    /// For every (kernel tap, output voxel) pair, the flat input offset or `usize::MAX` for padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kz, ky, kx] = self.kernel;
        let [oz, oy, ox] = self.output;
        let [iz, iy, ix] = self.input;
        let s = self.stride as isize;
        let mut tap = 0;
        for a in 0..kz {
            for b in 0..ky {
                for c in 0..kx {
                    let mut o = 0;
                    for z in 0..oz {
                        let zz = z as isize * s + a as isize - self.pad[0] as isize;
                        for y in 0..oy {
                            let yy = y as isize * s + b as isize - self.pad[1] as isize;
                            for x in 0..ox {
                                let xx = x as isize * s + c as isize - self.pad[2] as isize;
                                let inside = zz >= 0
                                    && yy >= 0
                                    && xx >= 0
                                    && (zz as usize) < iz
                                    && (yy as usize) < iy
                                    && (xx as usize) < ix;
                                let src = if inside {
                                    ((zz as usize) * iy + yy as usize) * ix + xx as usize
                                } else {
                                    usize::MAX
                                };
                                f(tap, o, src);
                                o += 1;
                            }
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
}

fn lift3(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

/// Cross-correlation with zero padding; `bias` has one entry per output channel.
pub fn conv<T: Element>(
    x: &Var<T>,
    w: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let nd = xs.len().saturating_sub(1);
    if !(1..=3).contains(&nd) || ws.len() != nd + 2 {
        return Err(TensorError::dimension("conv", xs, ws));
    }
    if ws[1] != xs[0] {
        return Err(TensorError::dimension("conv", xs, ws));
    }
    if ws[2..].iter().any(|&k| k % 2 == 0) {
        return Err(TensorError::parameter(
            "conv",
            format!("kernel extents must be odd, got {:?}", &ws[2..]),
        ));
    }
    if stride == 0 {
        return Err(TensorError::parameter("conv", "stride must be positive"));
    }
    let (c_out, c_in) = (ws[0], ws[1]);
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(TensorError::dimension("conv", ws, b.shape()));
        }
    }
    let input = lift3(&xs[1..], 1);
    let kernel = lift3(&ws[2..], 1);
    let mut pad = [0; 3];
    for ax in 3 - nd..3 {
        pad[ax] = padding;
    }
    let mut output = [1; 3];
    for ax in 0..3 {
        let span = input[ax] + 2 * pad[ax];
        if span < kernel[ax] {
            return Err(TensorError::parameter(
                "conv",
                format!("kernel {:?} larger than padded input {:?}", &ws[2..], &xs[1..]),
            ));
        }
        output[ax] = (span - kernel[ax]) / stride + 1;
    }
    let geo = Geometry {
        input,
        kernel,
        output,
        pad,
        stride,
    };
    let (kl, ol, il) = (geo.kernel_len(), geo.out_len(), geo.in_len());
    let rows = c_in * kl;

    // im2col: row (c, tap), column output voxel.
    let xd = x.data();
    let mut cols = vec![T::zero(); rows * ol];
    for c in 0..c_in {
        let xc = &xd[c * il..(c + 1) * il];
        let base = c * kl * ol;
        geo.for_each_tap(|tap, o, src| {
            if src != usize::MAX {
                cols[base + tap * ol + o] = xc[src];
            }
        });
    }

    let mut out = vec![T::zero(); c_out * ol];
    mm(c_out, rows, ol, w.data(), (rows, 1), &cols, (ol, 1), &mut out, false);
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate() {
            out[co * ol..(co + 1) * ol].iter_mut().for_each(|v| *v = *v + bv);
        }
    }

    let mut shape = vec![c_out];
    shape.extend_from_slice(&output[3 - nd..]);

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let need_x = x.requires_grad();
    let need_w = w.requires_grad();
    let need_b = bias.is_some_and(|b| b.requires_grad());
    let has_bias = bias.is_some();
    let wv = w.clone();
    Ok(Var::from_op(Tensor::from_parts(shape, out), parents, move |g| {
        let gw = need_w.then(|| {
            let mut gw = vec![T::zero(); c_out * rows];
            mm(c_out, ol, rows, g, (ol, 1), &cols, (1, ol), &mut gw, false);
            gw
        });
        let gx = need_x.then(|| {
            let mut gcols = vec![T::zero(); rows * ol];
            mm(rows, c_out, ol, wv.data(), (1, rows), g, (ol, 1), &mut gcols, false);
            let mut gx = vec![T::zero(); c_in * il];
            for c in 0..c_in {
                let gxc = &mut gx[c * il..(c + 1) * il];
                let base = c * kl * ol;
                geo.for_each_tap(|tap, o, src| {
                    if src != usize::MAX {
                        gxc[src] = gxc[src] + gcols[base + tap * ol + o];
                    }
                });
            }
            gx
        });
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(need_b.then(|| (0..c_out).map(|co| g[co * ol..(co + 1) * ol].iter().copied().sum()).collect()));
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_kernel_doubles() {
        let x = Tensor::<f64>::from_fn([1, 4, 5], |i| (i[1] * 5 + i[2]) as f64);
        let w = Tensor::<f64>::full([1, 1, 1, 1], 2.0);
        let y = conv(&Var::constant(x.clone()), &Var::constant(w), None, 1, 0).unwrap();
        let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(y.data(), want.as_slice());
    }

    #[test]
    fn averaging_preserves_constant_interior() {
        let x = Tensor::<f64>::full([1, 6, 6], 3.5);
        let w = Tensor::<f64>::full([1, 1, 3, 3], 1.0 / 9.0);
        let y = conv(&Var::constant(x), &Var::constant(w), None, 1, 1).unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert!((y.value().get(&[0, r, c]) - 3.5).abs() < 1e-12);
            }
        }
        // zero padding shows at the corner: 4 of 9 taps inside
        assert!((y.value().get(&[0, 0, 0]) - 3.5 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn stride_two_extent() {
        let x = Var::constant(Tensor::<f64>::ones([2, 8, 8, 8]));
        let w = Var::constant(Tensor::<f64>::ones([3, 2, 3, 3, 3]));
        let y = conv(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4, 4]);
    }

    #[test]
    fn channel_mismatch() {
        let x = Var::constant(Tensor::<f64>::ones([2, 4, 4]));
        let w = Var::constant(Tensor::<f64>::ones([1, 3, 3, 3]));
        assert!(matches!(conv(&x, &w, None, 1, 1), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Var::constant(Tensor::<f64>::ones([1, 4, 4]));
        let w = Var::constant(Tensor::<f64>::ones([1, 1, 2, 2]));
        assert!(matches!(conv(&x, &w, None, 1, 0), Err(TensorError::Parameter { .. })));
    }
}
