//! Brute-force reference implementations shared by the integration tests.
//! Each one is written directly from the definition, with plain loops and
//! no code from the library under test.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfa::geometry::{DisplacementField, TransformGrid};
use vfa::metrics::LabelMap;
use vfa_tensor::{Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn flat(idx: &[usize], dims: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (&i, &n)| acc * n + i)
}

pub fn unflat(mut p: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for ax in (0..dims.len()).rev() {
        idx[ax] = p % dims[ax];
        p /= dims[ax];
    }
    idx
}

/// Linear interpolation of one channel at a continuous point, clamped to the border.
pub fn interp(channel: &[f64], dims: &[usize], point: &[f64]) -> f64 {
    let d = dims.len();
    let mut total = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut idx = vec![0usize; d];
        for ax in 0..d {
            let top = (dims[ax] - 1) as f64;
            let x = point[ax].clamp(0.0, top);
            let lo = x.floor().min((dims[ax].max(2) - 2) as f64).max(0.0);
            let t = x - lo;
            let hi = corner >> ax & 1 == 1;
            idx[ax] = (lo as usize + hi as usize).min(dims[ax] - 1);
            w *= if hi { t } else { 1.0 - t };
        }
        if w != 0.0 {
            total += w * channel[flat(&idx, dims)];
        }
    }
    total
}

/// Smooth random displacement `[d, dims..]` built from a few sinusoids.
pub fn smooth_disp(rng: &mut ChaCha8Rng, dims: &[usize], amp: f64) -> Tensor<f64> {
    smooth_disp_k(rng, dims, amp, 0.6)
}

/// As [`smooth_disp`], with wavenumbers (radians per voxel) below `kmax`.
pub fn smooth_disp_k(rng: &mut ChaCha8Rng, dims: &[usize], amp: f64, kmax: f64) -> Tensor<f64> {
    let d = dims.len();
    let waves: Vec<(Vec<f64>, f64, f64)> = (0..d * 3)
        .map(|_| {
            let k = (0..d).map(|_| rng.random_range(-kmax..kmax)).collect();
            (k, rng.random_range(0.0..6.3), rng.random_range(-1.0..1.0))
        })
        .collect();
    let mut shape = vec![d];
    shape.extend_from_slice(dims);
    Tensor::from_fn(shape, |i| {
        let c = i[0];
        waves[c * 3..c * 3 + 3]
            .iter()
            .map(|(k, ph, a)| a * (k.iter().zip(&i[1..]).map(|(kk, &x)| kk * x as f64).sum::<f64>() + ph).sin())
            .sum::<f64>()
            * amp
    })
}

pub fn transform(u: Tensor<f64>) -> TransformGrid<f64> {
    TransformGrid::from_displacement(DisplacementField::new(Var::constant(u)).unwrap())
}

/// Absolute coordinates of a transform, `[channel][voxel]`.
pub fn coords(phi: &TransformGrid<f64>) -> Vec<Vec<f64>> {
    let dims = phi.dims().to_vec();
    let n: usize = dims.iter().product();
    let u = phi.disp_var().data();
    (0..dims.len())
        .map(|c| (0..n).map(|p| unflat(p, &dims)[c] as f64 + u[c * n + p]).collect())
        .collect()
}

fn det(m: &[Vec<f64>]) -> f64 {
    match m.len() {
        2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
        3 => {
            m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1]
                - m[0][2] * m[1][1] * m[2][0]
                - m[0][0] * m[1][2] * m[2][1]
                - m[0][1] * m[1][0] * m[2][2]
        }
        _ => unreachable!(),
    }
}

/// Central-difference Jacobian determinant of the absolute coordinates
/// at every interior voxel, in row-major interior order.
pub fn jacobian(phi: &TransformGrid<f64>) -> Vec<f64> {
    let dims = phi.dims().to_vec();
    let d = dims.len();
    let c = coords(phi);
    let inner: Vec<usize> = dims.iter().map(|&n| n - 2).collect();
    let count: usize = inner.iter().product();
    (0..count)
        .map(|q| {
            let idx: Vec<usize> = unflat(q, &inner).iter().map(|i| i + 1).collect();
            let m: Vec<Vec<f64>> = (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            let mut a = idx.clone();
                            let mut b = idx.clone();
                            a[j] += 1;
                            b[j] -= 1;
                            (c[i][flat(&a, &dims)] - c[i][flat(&b, &dims)]) / 2.0
                        })
                        .collect()
                })
                .collect();
            det(&m)
        })
        .collect()
}

pub fn nd_voxels(phi: &TransformGrid<f64>) -> usize {
    jacobian(phi).iter().filter(|&&v| v <= 0.0).count()
}

pub fn sdlogj(phi: &TransformGrid<f64>) -> f64 {
    let logs: Vec<f64> = jacobian(phi).iter().map(|&v| v.max(1e-6).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    (logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n).sqrt()
}

/// Signed volume of a simplex given its `d + 1` vertices.
fn simplex_volume(v: &[Vec<f64>]) -> f64 {
    let d = v.len() - 1;
    let m: Vec<Vec<f64>> = (0..d).map(|r| (1..=d).map(|k| v[k][r] - v[0][r]).collect()).collect();
    det(&m) / if d == 2 { 2.0 } else { 6.0 }
}

/// Corner paths of the Kuhn simplices of a unit cell: every ordering of
/// the axes gives the walk 0 → e_a → e_a + e_b (→ 1).
fn kuhn_paths(d: usize) -> Vec<Vec<Vec<usize>>> {
    let orders: Vec<Vec<usize>> = if d == 2 {
        vec![vec![0, 1], vec![1, 0]]
    } else {
        vec![vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]]
    };
    orders
        .into_iter()
        .map(|o| {
            let mut corner = vec![0usize; d];
            let mut path = vec![corner.clone()];
            for ax in o {
                corner[ax] = 1;
                path.push(corner.clone());
            }
            path
        })
        .collect()
}

/// Folded volume: for each Kuhn simplex, the signed volume of its image
/// counts when its orientation is opposite to the reference simplex.
pub fn nd_volume(phi: &TransformGrid<f64>) -> f64 {
    let dims = phi.dims().to_vec();
    let d = dims.len();
    let c = coords(phi);
    let cells: Vec<usize> = dims.iter().map(|&n| n - 1).collect();
    let ncells: usize = cells.iter().product();
    let paths = kuhn_paths(d);
    let mut total = 0.0;
    for q in 0..ncells {
        let base = unflat(q, &cells);
        for path in &paths {
            let reference: Vec<Vec<f64>> = path.iter().map(|o| o.iter().map(|&x| x as f64).collect()).collect();
            let orient = simplex_volume(&reference).signum();
            let image: Vec<Vec<f64>> = path
                .iter()
                .map(|o| {
                    let idx: Vec<usize> = base.iter().zip(o).map(|(b, o)| b + o).collect();
                    let p = flat(&idx, &dims);
                    (0..d).map(|ch| c[ch][p]).collect()
                })
                .collect();
            let v = orient * simplex_volume(&image);
            if v < 0.0 {
                total += -v;
            }
        }
    }
    total
}

/// Per-class Dice over foreground classes present in either map.
pub fn dice(a: &LabelMap, b: &LabelMap) -> BTreeMap<i32, f64> {
    let mut counts: BTreeMap<i32, (usize, usize, usize)> = BTreeMap::new();
    for (&x, &y) in a.data.iter().zip(&b.data) {
        if x != 0 {
            counts.entry(x).or_default().0 += 1;
        }
        if y != 0 {
            counts.entry(y).or_default().1 += 1;
        }
        if x != 0 && x == y {
            counts.entry(x).or_default().2 += 1;
        }
    }
    counts.into_iter().map(|(k, (na, nb, both))| (k, 2.0 * both as f64 / (na + nb) as f64)).collect()
}

fn is_boundary(m: &LabelMap, idx: &[usize], class: i32) -> bool {
    if m.data[flat(idx, &m.dims)] != class {
        return false;
    }
    for ax in 0..idx.len() {
        for step in [-1i64, 1] {
            let k = idx[ax] as i64 + step;
            if k < 0 || k >= m.dims[ax] as i64 {
                return true;
            }
            let mut n = idx.to_vec();
            n[ax] = k as usize;
            if m.data[flat(&n, &m.dims)] != class {
                return true;
            }
        }
    }
    false
}

/// Symmetric 95th-percentile boundary distance, nearest-rank rule.
pub fn hd95(a: &LabelMap, b: &LabelMap, class: i32, spacing: &[f64]) -> Option<f64> {
    let n: usize = a.dims.iter().product();
    let pts = |m: &LabelMap| -> Vec<Vec<usize>> {
        (0..n).map(|p| unflat(p, &m.dims)).filter(|i| is_boundary(m, i, class)).collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let dist = |p: &Vec<usize>, q: &Vec<usize>| {
        p.iter().zip(q).zip(spacing).map(|((&x, &y), s)| ((x as f64 - y as f64) * s).powi(2)).sum::<f64>().sqrt()
    };
    let mut all = Vec::new();
    for (from, to) in [(&pa, &pb), (&pb, &pa)] {
        for p in from {
            all.push(to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
    }
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = (0.95 * all.len() as f64).ceil() as usize;
    Some(all[rank.max(1) - 1])
}

/// Per-point TRE with the displacement interpolated at each fixed point.
pub fn tre(phi: &TransformGrid<f64>, fixed: &[Vec<f64>], moving: &[Vec<f64>], spacing: &[f64]) -> Vec<f64> {
    let dims = phi.dims().to_vec();
    let n: usize = dims.iter().product();
    let u = phi.disp_var().data();
    fixed
        .iter()
        .zip(moving)
        .map(|(f, m)| {
            (0..dims.len())
                .map(|c| {
                    let mapped = f[c] + interp(&u[c * n..(c + 1) * n], &dims, f);
                    ((mapped - m[c]) * spacing[c]).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub fn tre30(means: &[f64]) -> f64 {
    let mut v = means.to_vec();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let k = (0.3 * v.len() as f64).ceil() as usize;
    v[..k].iter().sum::<f64>() / k as f64
}

/// Random label map made of a few axis-aligned boxes of classes 1..=3.
pub fn random_labels(rng: &mut ChaCha8Rng, dims: &[usize]) -> LabelMap {
    let n: usize = dims.iter().product();
    let mut data = vec![0i32; n];
    for class in 1..=3 {
        if rng.random_bool(0.15) {
            continue;
        }
        let lo: Vec<usize> = dims.iter().map(|&e| rng.random_range(0..e - 1)).collect();
        let hi: Vec<usize> = lo.iter().zip(dims).map(|(&l, &e)| rng.random_range(l + 1..=e)).collect();
        for (p, v) in data.iter_mut().enumerate() {
            let idx = unflat(p, dims);
            if idx.iter().zip(&lo).zip(&hi).all(|((&i, &l), &h)| i >= l && i < h) {
                *v = class;
            }
        }
    }
    LabelMap::new(dims.to_vec(), data).unwrap()
}

/// Global Pearson correlation of two equally sized samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut c = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    c / (va * vb).sqrt()
}

/// One-hot descriptors: channel `p` is 1 exactly at voxel `p`. Returns
/// `(F, M)` with `M(y) = F(y − s)`, zero where `y − s` leaves the grid.
pub fn one_hot_pair(dims: &[usize], s: &[isize]) -> (Tensor<f64>, Tensor<f64>) {
    let n: usize = dims.iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(dims);
    let f = Tensor::from_fn(shape.clone(), |i| (flat(&i[1..], dims) == i[0]) as u8 as f64);
    let m = Tensor::from_fn(shape, |i| {
        let src: Vec<isize> = i[1..].iter().zip(s).map(|(&y, &s)| y as isize - s).collect();
        let inside = src.iter().zip(dims).all(|(&v, &e)| v >= 0 && v < e as isize);
        (inside && flat(&src.iter().map(|&v| v as usize).collect::<Vec<_>>(), dims) == i[0]) as u8 as f64
    });
    (f, m)
}

/// Best-scoring window offset at voxel `p` by exhaustive search, with
/// replicate clamping at the border and the first maximum winning.
pub fn argmax_offset(f: &Tensor<f64>, m: &Tensor<f64>, p: usize) -> Vec<isize> {
    let c = f.shape()[0];
    let dims = f.shape()[1..].to_vec();
    let n: usize = dims.iter().product();
    let x = unflat(p, &dims);
    let mut best = (f64::NEG_INFINITY, vec![]);
    let d = dims.len();
    for code in 0..3usize.pow(d as u32) {
        let k: Vec<isize> = (0..d).map(|ax| (code / 3usize.pow((d - 1 - ax) as u32) % 3) as isize - 1).collect();
        let q: Vec<usize> = x
            .iter()
            .zip(&k)
            .zip(&dims)
            .map(|((&xi, &ki), &e)| (xi as isize + ki).clamp(0, e as isize - 1) as usize)
            .collect();
        let qp = flat(&q, &dims);
        let score: f64 = (0..c).map(|ch| f.data()[ch * n + p] * m.data()[ch * n + qp]).sum();
        if score > best.0 {
            best = (score, k);
        }
    }
    best.1
}

/// Every shift in `{−1, 0, 1}^d`.
pub fn unit_shifts(d: usize) -> Vec<Vec<isize>> {
    (0..3usize.pow(d as u32))
        .map(|code| (0..d).map(|ax| (code / 3usize.pow((d - 1 - ax) as u32) % 3) as isize - 1).collect())
        .collect()
}

/// Largest error between attention output and the true shift over the
/// voxels at least one voxel from the border, after checking that the
/// brute-force argmax agrees with the shift there.
pub fn shift_error(dims: &[usize], s: &[isize], temperature: f64) -> f64 {
    use vfa::attention::{vfa_attention, AttentionConfig, Temperature};
    let (f, m) = one_hot_pair(dims, s);
    let cfg = AttentionConfig { temperature: Temperature::Fixed(temperature), ..Default::default() };
    let att = vfa_attention(&Var::constant(f.clone()), &Var::constant(m.clone()), &cfg).unwrap();
    let u = att.displacement.var().data().to_vec();
    let n: usize = dims.iter().product();
    let mut worst: f64 = 0.0;
    for p in 0..n {
        let x = unflat(p, dims);
        if !x.iter().zip(dims).all(|(&i, &e)| i >= 1 && i + 1 < e) {
            continue;
        }
        assert_eq!(argmax_offset(&f, &m, p), s, "oracle disagrees with the constructed shift at {x:?}");
        for (ax, &sv) in s.iter().enumerate() {
            worst = worst.max((u[ax * n + p] - sv as f64).abs());
        }
    }
    worst
}

/// Compares every library metric with its brute-force counterpart on
/// `instances` random cases, alternating 2D and 3D. Integer counts must
/// match exactly and reals within 1e-9. Returns one line per mismatch.
pub fn metric_oracle_mismatches(instances: u64) -> Vec<String> {
    use vfa::geometry::KeypointSet;
    use vfa::metrics as m;

    let mut bad = Vec::new();
    fn close(bad: &mut Vec<String>, what: &str, case: u64, got: f64, want: f64) {
        if !((got - want).abs() <= 1e-9 * want.abs().max(1.0)) {
            bad.push(format!("case {case}: {what} got {got} want {want}"));
        }
    }
    let mut counts = Vec::new();
    let mut case_means = Vec::new();
    for case in 0..instances {
        let mut r = rng(10_000 + case);
        let dims: Vec<usize> = if case % 2 == 0 { vec![9, 8] } else { vec![6, 5, 7] };
        let d = dims.len();
        // Amplitudes up to 3 voxels at kmax 0.8 fold a fair share of cases.
        let amp = r.random_range(0.0..3.0);
        let phi = transform(smooth_disp_k(&mut r, &dims, amp, 0.8));

        let jac = m::jacobian_determinant(&phi).unwrap();
        for (g, w) in jac.values.iter().zip(jacobian(&phi)) {
            close(&mut bad, "jacobian", case, *g, w);
        }
        let nv = m::nd_voxels(&phi).unwrap();
        let want = nd_voxels(&phi);
        if nv.count != want {
            bad.push(format!("case {case}: nd_voxels got {} want {want}", nv.count));
        }
        counts.push(want);
        close(&mut bad, "nd_volume", case, m::nd_volume(&phi).unwrap().volume, nd_volume(&phi));
        close(&mut bad, "sdlogj", case, m::sdlogj(&phi).unwrap(), sdlogj(&phi));

        let a = random_labels(&mut r, &dims);
        let b = random_labels(&mut r, &dims);
        let got = m::dice_score(&a, &b).unwrap();
        let want = dice(&a, &b);
        let got_classes: Vec<i32> = got.per_class.iter().map(|p| p.0).collect();
        if got_classes != want.keys().copied().collect::<Vec<_>>() {
            bad.push(format!("case {case}: dice classes {got_classes:?} vs {:?}", want.keys()));
        }
        for (c, s) in &got.per_class {
            close(&mut bad, "dice", case, *s, want.get(c).copied().unwrap_or(f64::NAN));
        }
        let spacing: Vec<f64> = (0..d).map(|_| r.random_range(0.5..2.0)).collect();
        for class in 1..=3 {
            match (m::hd95(&a, &b, class, &spacing).unwrap(), hd95(&a, &b, class, &spacing)) {
                (Some(g), Some(w)) => close(&mut bad, "hd95", case, g, w),
                (None, None) => {}
                (g, w) => bad.push(format!("case {case}: hd95 class {class} got {g:?} want {w:?}")),
            }
        }

        let np = r.random_range(1..8);
        let fixed: Vec<Vec<f64>> =
            (0..np).map(|_| dims.iter().map(|&e| r.random_range(0.0..(e - 1) as f64)).collect()).collect();
        let moving: Vec<Vec<f64>> =
            (0..np).map(|_| dims.iter().map(|&e| r.random_range(0.0..(e - 1) as f64)).collect()).collect();
        let kp = KeypointSet::new(fixed.clone(), moving.clone(), spacing.clone()).unwrap();
        let got = m::tre(&phi, &kp).unwrap();
        let want = tre(&phi, &fixed, &moving, &spacing);
        for (g, w) in got.per_point.iter().zip(&want) {
            close(&mut bad, "tre", case, *g, *w);
        }
        let mean = want.iter().sum::<f64>() / want.len() as f64;
        close(&mut bad, "tre mean", case, got.mean, mean);
        case_means.push(mean);
        close(&mut bad, "tre30", case, m::tre30(&case_means).unwrap(), tre30(&case_means));
    }
    if instances >= 10 && counts.iter().all(|&c| c == 0) {
        bad.push("no random instance folded, so the fold oracles went unexercised".into());
    }
    bad
}

/// A small 2D/3D model: `levels` pyramid levels of 4 channels each.
pub fn small_model(ndim: usize, levels: usize, beta0: f64, seed: u64) -> vfa::model::VfaModel<f64> {
    use vfa::extractor::ExtractorConfig;
    use vfa::model::{ModelConfig, VfaModel};
    VfaModel::new(ModelConfig {
        ndim,
        extractor: ExtractorConfig { channels: vec![4; levels], match_channels: 4, ..Default::default() },
        beta0,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Search-region diameter per axis of an `levels`-level model, measured
/// at the central voxel of a 2D image. Every level's attention is forced
/// onto the first and then the last window candidate (the two opposite
/// corners) with β = 1. The region is the span between the two extreme
/// displacements plus the footprint of one coarsest-level voxel.
pub fn search_region(levels: usize) -> Vec<f64> {
    let side = 8 << (levels - 1);
    let dims = [side, side];
    let img = Var::constant(Tensor::from_fn([1, side, side], |i| ((i[1] * 7 + i[2] * 3) % 11) as f64));
    let centre = flat(&[side / 2, side / 2], &dims);
    let n = side * side;
    let run = |candidate: usize| -> Vec<f64> {
        let mut model = small_model(2, levels, 1.0, 0);
        model.config.attention.force_candidate = Some(candidate);
        let reg = model.register(&img, &img).unwrap();
        let u = reg.phi.disp_var().data();
        (0..2).map(|ax| u[ax * n + centre]).collect()
    };
    let lo = run(0);
    let hi = run(8);
    lo.iter().zip(&hi).map(|(a, b)| b - a + (1usize << (levels - 1)) as f64).collect()
}
