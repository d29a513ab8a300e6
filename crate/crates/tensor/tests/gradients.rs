use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfa_tensor::gradcheck::{check, GradCheckConfig};
use vfa_tensor::{concat, conv, grid_sample, matmul, softmax, Tensor, Var};

const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(y: &Var<f64>, seed: u64) -> vfa_tensor::Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Var::constant(rand_tensor(&mut rng, y.shape()));
    Ok(y.mul(&w)?.sum())
}

fn assert_grad<F>(name: &str, f: F, inputs: &[Tensor<f64>], tol: f64)
where
    F: Fn(&[Var<f64>]) -> vfa_tensor::Result<Var<f64>>,
{
    let rep = check(f, inputs, GradCheckConfig::default()).unwrap();
    assert!(
        rep.max_rel_err() < tol,
        "{name}: max rel err {} ({:?})",
        rep.max_rel_err(),
        rep.inputs
    );
}

#[test]
fn matmul_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    assert_grad("matmul", |v| Ok(matmul(&v[0], &v[1])?.sum()), &[a, b], 1e-6);
}

#[test]
fn batched_matmul_broadcast_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[5, 1, 6]);
    let b = rand_tensor(&mut rng, &[6, 3]);
    assert_grad("bmm", |v| probe(&matmul(&v[0], &v[1])?, 3), &[a, b], TOL);
    // large enough to take the GEMM path
    let a = rand_tensor(&mut rng, &[2, 12, 16]);
    let b = rand_tensor(&mut rng, &[2, 16, 9]);
    assert_grad("bmm-gemm", |v| probe(&matmul(&v[0], &v[1])?, 4), &[a, b], TOL);
}

#[test]
fn softmax_gradient_over_temperatures() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 9]);
    for t in [1.0, 0.3, 4.0] {
        assert_grad("softmax", |v| probe(&softmax(&v[0], 1, t)?, 6), &[x.clone()], TOL);
    }
    assert_grad("softmax-axis0", |v| probe(&softmax(&v[0], 0, 1.0)?, 7), &[x], TOL);
}

#[test]
fn conv2d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 8, 8]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    assert_grad(
        "conv2d",
        |v| probe(&conv(&v[0], &v[1], Some(&v[2]), 1, 1)?, 9),
        &[x.clone(), w.clone(), b],
        TOL,
    );
    assert_grad("conv2d-stride", |v| probe(&conv(&v[0], &v[1], None, 2, 1)?, 10), &[x, w], TOL);
}

#[test]
fn conv3d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 4, 5, 3]);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
    assert_grad("conv3d", |v| probe(&conv(&v[0], &v[1], None, 1, 1)?, 12), &[x, w], TOL);
}

#[test]
fn resample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[2, 6, 4]);
    assert_grad("downsample2", |v| probe(&v[0].downsample2()?, 14), &[x.clone()], TOL);
    assert_grad("upsample2", |v| probe(&v[0].upsample2()?, 15), &[x], TOL);
    let x3 = rand_tensor(&mut rng, &[1, 2, 4, 2]);
    assert_grad("upsample2-3d", |v| probe(&v[0].upsample2()?, 16), &[x3], TOL);
}

#[test]
fn grid_sample_gradient_wrt_image_and_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let img = rand_tensor(&mut rng, &[2, 6, 7]);
    // keep coordinates away from integer cell boundaries
    let coords = Tensor::from_fn([2, 4, 5], |i| {
        let ext = if i[0] == 0 { 6.0 } else { 7.0 };
        let base: f64 = rng.random_range(0.0..ext - 1.0);
        base.floor() + 0.2 + 0.6 * base.fract()
    });
    assert_grad(
        "grid_sample",
        |v| probe(&grid_sample(&v[0], &v[1])?, 18),
        &[img, coords],
        1e-4,
    );
}

#[test]
fn grid_sample_3d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let img = rand_tensor(&mut rng, &[1, 4, 4, 4]);
    let coords = Tensor::from_fn([3, 6], |_| {
        let base: f64 = rng.random_range(0.0..3.0);
        base.floor() + 0.15 + 0.7 * base.fract()
    });
    assert_grad(
        "grid_sample-3d",
        |v| probe(&grid_sample(&v[0], &v[1])?, 20),
        &[img, coords],
        1e-4,
    );
}

#[test]
fn elementwise_and_shape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = Tensor::from_fn([4], |_| rng.random_range(0.5..2.0));
    let pos = Tensor::from_fn([3, 4], |_| rng.random_range(0.5..2.0));
    assert_grad("div", |v| probe(&v[0].div(&v[1])?, 22), &[a.clone(), b.clone()], TOL);
    assert_grad("sub", |v| probe(&v[0].sub(&v[1])?, 23), &[a.clone(), b], TOL);
    assert_grad("exp", |v| probe(&v[0].exp(), 24), &[a.clone()], TOL);
    assert_grad("ln", |v| probe(&v[0].ln(), 25), &[pos.clone()], TOL);
    assert_grad("sqrt", |v| probe(&v[0].sqrt(), 26), &[pos.clone()], TOL);
    assert_grad("recip", |v| probe(&v[0].recip(), 27), &[pos], TOL);
    assert_grad("leaky_relu", |v| probe(&v[0].leaky_relu(0.2), 28), &[a.clone()], TOL);
    assert_grad("permute", |v| probe(&v[0].permute(&[1, 0])?, 29), &[a.clone()], TOL);
    assert_grad("sum_axis", |v| probe(&v[0].sum_axis(0, true)?, 30), &[a.clone()], TOL);
    assert_grad("norm_axis", |v| probe(&v[0].norm_axis(1, false)?, 31), &[a.clone()], TOL);
    assert_grad(
        "narrow+concat",
        |v| {
            let l = v[0].narrow(1, 0, 1)?;
            let r = v[0].narrow(1, 2, 2)?;
            probe(&concat(&[r, l], 1)?, 32)
        },
        &[a.clone()],
        TOL,
    );
    assert_grad(
        "gather",
        |v| probe(&v[0].gather(Arc::new(vec![0, 5, 5, 11, 3]), [5])?, 33),
        &[a],
        TOL,
    );
}

#[test]
fn ops_do_not_modify_inputs_and_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let x = rand_tensor(&mut rng, &[2, 8, 8]);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let xv = Var::param(x.clone());
    let wv = Var::param(w.clone());
    let run = || {
        let y = conv(&xv, &wv, None, 1, 1).unwrap().upsample2().unwrap();
        softmax(&y, 0, 0.7).unwrap()
    };
    let y1 = run();
    let y2 = run();
    assert_eq!(xv.value(), &x);
    assert_eq!(wv.value(), &w);
    let bits = |v: &Var<f64>| v.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&y1), bits(&y2));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_f64(data in prop::collection::vec(-30.0f64..30.0, 12), t in 0.01f64..10.0) {
        let x = Var::constant(Tensor::new([3, 4], data).unwrap());
        let y = softmax(&x, 1, t).unwrap();
        for row in y.data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution_f32(data in prop::collection::vec(-30.0f32..30.0, 27), t in 0.01f64..10.0) {
        let x = Var::constant(Tensor::new([1, 27], data).unwrap());
        let y = softmax(&x, 1, t).unwrap();
        prop_assert!(y.data().iter().all(|&p| p >= 0.0));
        prop_assert!((y.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_sample_at_integer_points_is_exact(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = rand_tensor(&mut rng, &[2, 5, 4]);
        let coords = Tensor::from_fn([2, 7], |i| {
            let ext = if i[0] == 0 { 5 } else { 4 };
            rng.random_range(0..ext) as f64
        });
        let y = grid_sample(&Var::constant(img.clone()), &Var::constant(coords.clone())).unwrap();
        for p in 0..7 {
            let r = coords.get(&[0, p]) as usize;
            let c = coords.get(&[1, p]) as usize;
            for ch in 0..2 {
                prop_assert_eq!(y.value().get(&[ch, p]).to_bits(), img.get(&[ch, r, c]).to_bits());
            }
        }
    }
}
