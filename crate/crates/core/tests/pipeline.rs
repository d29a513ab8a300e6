mod common;

use common::{rng, small_model};
use rand::Rng;
use vfa::dataio::{gen_synthetic_pair, ImageKind, SynthSpec};
use vfa::extractor::{ExtractorConfig, PairExtractor};
use vfa::geometry::{compose, upsample_transform, TransformGrid};
use vfa::losses::LossConfig;
use vfa::optim::{Adam, AdamConfig};
use vfa::train::{fit, pair_loss, train_step, Pair, TrainConfig};
use vfa_tensor::{Tensor, Var};

fn noise_image(seed: u64, dims: &[usize]) -> Var<f64> {
    let mut r = rng(seed);
    let mut shape = vec![1];
    shape.extend_from_slice(dims);
    Var::constant(Tensor::from_fn(shape, |_| r.random_range(0.0..1.0)))
}

fn synth_pair(seed: u64, side: usize) -> Pair<f64> {
    let p = gen_synthetic_pair(&SynthSpec {
        kind: ImageKind::Texture,
        dims: vec![side, side],
        max_displacement: 3.0,
        seed,
        ..Default::default()
    })
    .unwrap();
    Pair::new(p.fixed, p.moving).unwrap()
}

#[test]
fn gradient_reaches_every_parameter() {
    let model = small_model(2, 3, 0.1, 3);
    let pair = synth_pair(1, 16);
    let loss = LossConfig::preset("t1-atlas").unwrap();
    let (value, _) = pair_loss(&model, &pair, &loss).unwrap();
    value.total.backward().unwrap();
    for (name, v) in model.store.iter() {
        let g = v.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        let norm: f64 = g.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "{name} gradient is zero");
    }
}

#[test]
fn zero_beta_gives_identity_exactly() {
    for ndim in [2, 3] {
        let model = small_model(ndim, 3, 0.0, 9);
        let dims = vec![8; ndim];
        let reg = model.register(&noise_image(1, &dims), &noise_image(2, &dims)).unwrap();
        assert!(reg.phi.disp_var().data().iter().all(|&v| v == 0.0));
        let id = TransformGrid::<f64>::identity(&dims).unwrap();
        assert_eq!(reg.phi.coords().unwrap().data(), id.coords().unwrap().data());
    }
}

#[test]
fn intermediates_have_level_extents_and_rebuild_the_output() {
    let model = small_model(2, 4, 0.7, 2);
    let reg = model.register(&noise_image(3, &[32, 24]), &noise_image(4, &[32, 24])).unwrap();
    assert_eq!(reg.levels.len(), 4);
    for (i, l) in reg.levels.iter().enumerate() {
        assert_eq!(l.phi.dims(), &[32 >> i, 24 >> i]);
        assert_eq!(l.weights.shape(), &[(32 >> i) * (24 >> i), 9]);
    }
    assert!(reg.levels[3].upsampled.disp_var().data().iter().all(|&v| v == 0.0));
    // Rebuild the chain from the stored local transforms.
    let beta = model.beta_var();
    let mut phi = vfa::geometry::apply_beta(&reg.levels[3].local, beta).unwrap();
    for i in (0..3).rev() {
        let up = upsample_transform(&phi).unwrap();
        assert_eq!(up.disp_var().data(), reg.levels[i].upsampled.disp_var().data());
        let local = vfa::geometry::apply_beta(&reg.levels[i].local, beta).unwrap();
        phi = compose(&local, &up).unwrap();
        assert_eq!(phi.disp_var().data(), reg.levels[i].phi.disp_var().data());
    }
    assert_eq!(phi.disp_var().data(), reg.phi.disp_var().data());
}

#[test]
fn search_region_follows_the_level_recurrence() {
    assert_eq!(common::search_region(1), vec![3.0, 3.0]);
    assert_eq!(common::search_region(2), vec![8.0, 8.0]);
    assert_eq!(common::search_region(3), vec![18.0, 18.0]);
}

#[test]
fn displacement_is_bounded_by_the_recurrence() {
    // Unforced attention stays inside the saturated corner bound times β.
    let model = small_model(2, 3, 0.8, 4);
    let reg = model.register(&noise_image(5, &[32, 32]), &noise_image(6, &[32, 32])).unwrap();
    let bound = 0.8 * ((1 << 3) - 1) as f64 + 1e-9;
    assert!(reg.phi.disp_var().data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn self_registration_stays_within_one_window() {
    let model = small_model(2, 3, 0.1, 5);
    let img = noise_image(7, &[16, 16]);
    let reg = model.register(&img, &img).unwrap();
    let worst = reg.phi.disp_var().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst <= 0.1 * 7.0, "{worst}");
}

#[test]
fn shared_weights_give_identical_pyramids_for_identical_inputs() {
    let ex = PairExtractor::<f64>::new(2, ExtractorConfig { channels: vec![4; 3], ..Default::default() }, 1).unwrap();
    let img = noise_image(8, &[16, 16]);
    let (f, m) = ex.extract_pair(&img, &img).unwrap();
    for (a, b) in f.levels.iter().zip(&m.levels) {
        assert_eq!(a.data(), b.data());
    }
    let (f2, _) = ex.extract_pair(&img, &img).unwrap();
    for (a, b) in f.levels.iter().zip(&f2.levels) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn separate_weights_differ_and_both_receive_gradient() {
    let cfg = ExtractorConfig { channels: vec![4; 3], shared_weights: false, ..Default::default() };
    let ex = PairExtractor::<f64>::new(2, cfg, 1).unwrap();
    let img = noise_image(9, &[16, 16]);
    let (f, m) = ex.extract_pair(&img, &img).unwrap();
    assert_ne!(f.levels[0].data(), m.levels[0].data());
    let mut total = f.levels[0].sum();
    total = total.add(&m.levels[0].mul(&m.levels[0]).unwrap().sum()).unwrap();
    total.backward().unwrap();
    let mut seen = [false; 2];
    for (name, v) in ex.store.iter() {
        let g = v.grad().map(|g| g.data().iter().any(|&x| x != 0.0)).unwrap_or(false);
        if name.starts_with("extractor_fixed") {
            seen[0] |= g;
        } else if name.starts_with("extractor_moving") {
            seen[1] |= g;
        }
    }
    assert_eq!(seen, [true, true]);
}

#[test]
fn pyramid_shapes_for_a_32_cube() {
    let cfg = ExtractorConfig { channels: vec![2, 3, 4, 5, 6], ..Default::default() };
    let ex = PairExtractor::<f32>::new(3, cfg, 0).unwrap();
    let img = vfa::extractor::blank_image::<f32>(&[32, 32, 32]);
    let (f, _) = ex.extract_pair(&img, &img).unwrap();
    for (i, l) in f.levels.iter().enumerate() {
        let e = 32 >> i;
        assert_eq!(l.shape(), &[i + 2, e, e, e]);
    }
    assert!(f.all_finite());
    let bad = vfa::extractor::blank_image::<f32>(&[24, 32, 32]);
    assert!(matches!(ex.extract_pair(&bad, &bad), Err(vfa::VfaError::Input(_))));
}

#[test]
fn training_lowers_the_loss_and_raises_beta() {
    let mut model = small_model(2, 3, 0.1, 1);
    let pair = synth_pair(2, 32);
    let loss = LossConfig::preset("t1-atlas").unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
    let mut totals = Vec::new();
    for _ in 0..100 {
        totals.push(train_step(&mut model, &mut opt, &pair, &loss).unwrap().total);
    }
    let ma = |i: usize| totals[i - 10..i].iter().sum::<f64>() / 10.0;
    assert!(ma(100) < ma(10), "moving average {} -> {}", ma(10), ma(100));
    assert!(model.beta() > 0.1, "beta {}", model.beta());
}

#[test]
fn fit_is_deterministic() {
    let data = vec![synth_pair(3, 16), synth_pair(4, 16)];
    let cfg = TrainConfig { epochs: 2, seed: 11, ..Default::default() };
    let run = || {
        let mut model = small_model(2, 3, 0.1, 1);
        let res = fit(&mut model, &data, &data[..1], &cfg, |_| {}).unwrap();
        (res.history, model.store.values())
    };
    let (h1, v1) = run();
    let (h2, v2) = run();
    assert_eq!(h1, h2);
    assert_eq!(v1, v2);
    assert_eq!(h1.len(), 4);
    assert!(h1[1].val_metric.is_some() && h1[0].val_metric.is_none());
}

#[test]
fn fit_rejects_an_empty_dataset() {
    let mut model = small_model(2, 3, 0.1, 1);
    let err = fit(&mut model, &[], &[], &TrainConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, vfa::VfaError::Usage(_)));
}

#[test]
fn flip_is_an_involution() {
    let mut p = synth_pair(5, 16);
    p.fixed_labels = Some(common::random_labels(&mut rng(1), &[16, 16]));
    for axes in [vec![0], vec![1], vec![0, 1]] {
        let back = p.flipped(&axes).flipped(&axes);
        assert_eq!(back.fixed, p.fixed);
        assert_eq!(back.moving, p.moving);
        assert_eq!(back.fixed_labels, p.fixed_labels);
    }
}
