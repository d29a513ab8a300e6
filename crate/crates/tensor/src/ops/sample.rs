use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{strides, Tensor};
use crate::var::Var;

struct Cell<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
    inside: Vec<bool>,
}

/// Linear interpolation of `img: [C, spatial..]` at voxel coordinates
/// `coords: [d, points..]`, giving `[C, points..]`.
///
/// Channel `j` of `coords` indexes spatial axis `j`. Coordinates are
/// clamped to `[0, extent − 1]` per axis before interpolating (border
/// replication); the coordinate gradient is zero where clamping is active.
/// Integer coordinates reproduce the stored samples bitwise.
pub fn grid_sample<T: Element>(img: &Var<T>, coords: &Var<T>) -> Result<Var<T>> {
    let (is, cs) = (img.shape(), coords.shape());
    let d = is.len().saturating_sub(1);
    if d == 0 || d > 3 || cs.is_empty() || cs[0] != d {
        return Err(TensorError::dimension("grid_sample", is, cs));
    }
    if coords.data().iter().any(|v| v.is_nan()) {
        return Err(TensorError::input("grid_sample", "NaN sampling coordinate"));
    }
    let channels = is[0];
    let extents = &is[1..];
    let spatial_len: usize = extents.iter().product();
    let istr = strides(extents);
    let npts: usize = cs[1..].iter().product();
    let cd = coords.data();

    let mut cells = Cell {
        lo: vec![0; npts * d],
        hi: vec![0; npts * d],
        frac: vec![T::zero(); npts * d],
        inside: vec![false; npts * d],
    };
    for p in 0..npts {
        for j in 0..d {
            let raw = cd[j * npts + p];
            let top = T::of((extents[j] - 1) as f64);
            let c = raw.max(T::zero()).min(top);
            let lo = c.floor();
            let lo_i = lo.as_f64() as usize;
            let at = p * d + j;
            cells.lo[at] = lo_i;
            cells.hi[at] = (lo_i + 1).min(extents[j] - 1);
            cells.frac[at] = c - lo;
            cells.inside[at] = raw >= T::zero() && raw <= top;
        }
    }

    let corners = 1usize << d;
    let xd = img.data();
    let mut out = vec![T::zero(); channels * npts];
    let mut offs = vec![0usize; corners];
    let mut wts = vec![T::zero(); corners];
    for p in 0..npts {
        corner_weights(&cells, p, d, &istr, &mut offs, &mut wts);
        for ch in 0..channels {
            let base = ch * spatial_len;
            let mut acc = T::zero();
            for (&o, &w) in offs.iter().zip(&wts) {
                acc = acc + w * xd[base + o];
            }
            out[ch * npts + p] = acc;
        }
    }

    let mut shape = vec![channels];
    shape.extend_from_slice(&cs[1..]);
    let need_img = img.requires_grad();
    let need_coords = coords.requires_grad();
    let iv = img.clone();
    let img_len = xd.len();
    Ok(Var::from_op(
        Tensor::from_parts(shape, out),
        vec![img.clone(), coords.clone()],
        move |g| {
            let xd = iv.data();
            let mut gi = need_img.then(|| vec![T::zero(); img_len]);
            let mut gc = need_coords.then(|| vec![T::zero(); d * npts]);
            let mut offs = vec![0usize; corners];
            let mut wts = vec![T::zero(); corners];
            for p in 0..npts {
                corner_weights(&cells, p, d, &istr, &mut offs, &mut wts);
                if let Some(gi) = gi.as_mut() {
                    for ch in 0..channels {
                        let gv = g[ch * npts + p];
                        let base = ch * spatial_len;
                        for (&o, &w) in offs.iter().zip(&wts) {
                            gi[base + o] = gi[base + o] + w * gv;
                        }
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    for j in 0..d {
                        if !cells.inside[p * d + j] {
                            continue;
                        }
                        let mut acc = T::zero();
                        for (k, &o) in offs.iter().enumerate() {
                            // derivative of the corner weight along axis j
                            let mut w = if (k >> (d - 1 - j)) & 1 == 1 { T::one() } else { -T::one() };
                            for m in 0..d {
                                if m == j {
                                    continue;
                                }
                                let f = cells.frac[p * d + m];
                                w = w * if (k >> (d - 1 - m)) & 1 == 1 { f } else { T::one() - f };
                            }
                            let mut dot = T::zero();
                            for ch in 0..channels {
                                dot = dot + g[ch * npts + p] * xd[ch * spatial_len + o];
                            }
                            acc = acc + w * dot;
                        }
                        gc[j * npts + p] = acc;
                    }
                }
            }
            vec![gi, gc]
        },
    ))
}

/// Flat offsets and weights of the 2^d interpolation corners of point `p`.
/// Bit `d − 1 − j` of the corner index selects the upper neighbour on axis `j`.
fn corner_weights<T: Element>(
    cells: &Cell<T>,
    p: usize,
    d: usize,
    istr: &[usize],
    offs: &mut [usize],
    wts: &mut [T],
) {
    for k in 0..offs.len() {
        let mut off = 0;
        let mut w = T::one();
        for j in 0..d {
            let at = p * d + j;
            let upper = (k >> (d - 1 - j)) & 1 == 1;
            let (idx, wj) = if upper {
                (cells.hi[at], cells.frac[at])
            } else {
                (cells.lo[at], T::one() - cells.frac[at])
            };
            off += idx * istr[j];
            w = w * wj;
        }
        offs[k] = off;
        wts[k] = w;
    }
}
