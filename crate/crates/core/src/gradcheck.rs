//! Finite-difference validation of every differentiable building block
//! and of the full registration network, in f64.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfa_tensor::gradcheck::{check_with, GradCheckConfig};
use vfa_tensor::{conv, grid_sample, matmul, softmax, Tensor, TensorError, Var};

use crate::attention::{extract_windows, vfa_attention, AttentionConfig};
use crate::error::{Result, VfaError};
use crate::extractor::ExtractorConfig;
use crate::geometry::{apply_beta, compose, scaling_and_squaring, DisplacementField, KeypointSet, TransformGrid};
use crate::losses::{dice_loss, diffusion_reg, mi_loss, mse_loss, ncc_loss, tre_loss};
use crate::model::{ModelConfig, VfaModel};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Image extent per axis for the 2D instance.
    pub size: usize,
    pub levels: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Negates the analytic gradient of the named check, to prove the
    /// harness notices.
    pub inject_sign_bug: Option<String>,
    /// Restricts the run to checks whose name contains this string.
    pub filter: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            size: 12,
            levels: 2,
            tolerance: 1e-4,
            seed: 0,
            inject_sign_bug: None,
            filter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub seconds: f64,
}

type Loss = Box<dyn Fn(&[Var<f64>]) -> Result<Var<f64>>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Loss,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Coordinates in `[0, n − 1]` kept at least 0.15 away from integers.
fn off_grid(rng: &mut ChaCha8Rng, shape: &[usize], extents: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| {
        let top = (extents[i[0]] - 1) as f64;
        let base: f64 = rng.random_range(0.0..top);
        base.floor() + 0.15 + 0.7 * base.fract()
    })
}

fn weighted(y: &Var<f64>, w: &Tensor<f64>) -> Result<Var<f64>> {
    Ok(y.mul(&Var::constant(w.clone()))?.sum())
}

fn transform(u: &Var<f64>) -> Result<TransformGrid<f64>> {
    Ok(TransformGrid::from_displacement(DisplacementField::new(u.clone())?))
}

fn smooth_field(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Tensor<f64> {
    let (a, b, c) = (rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(0.5..1.0));
    Tensor::from_fn([2, n, n], move |i| {
        let (y, x) = (i[1] as f64 / n as f64, i[2] as f64 / n as f64);
        amp * c * ((3.0 * y + a + i[0] as f64).sin() * (2.5 * x + b).cos())
    })
}

fn cases(opts: &GradcheckOptions) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.size;
    let mut out: Vec<Case> = Vec::new();

    let w = rand_t(&mut rng, &[3, 2], -1.0, 1.0);
    out.push(Case {
        name: "matmul",
        inputs: vec![rand_t(&mut rng, &[3, 4], -1.0, 1.0), rand_t(&mut rng, &[4, 2], -1.0, 1.0)],
        f: Box::new(move |v| weighted(&matmul(&v[0], &v[1])?, &w)),
    });
    let w = rand_t(&mut rng, &[4, 9], -1.0, 1.0);
    out.push(Case {
        name: "softmax",
        inputs: vec![rand_t(&mut rng, &[4, 9], -2.0, 2.0)],
        f: Box::new(move |v| weighted(&softmax(&v[0], 1, 3.0f64.sqrt())?, &w)),
    });
    let w = rand_t(&mut rng, &[3, n, n], -1.0, 1.0);
    out.push(Case {
        name: "conv",
        inputs: vec![
            rand_t(&mut rng, &[2, n, n], -1.0, 1.0),
            rand_t(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            rand_t(&mut rng, &[3], -1.0, 1.0),
        ],
        f: Box::new(move |v| weighted(&conv(&v[0], &v[1], Some(&v[2]), 1, 1)?, &w)),
    });
    let w = rand_t(&mut rng, &[2, n / 2, n / 2], -1.0, 1.0);
    out.push(Case {
        name: "downsample2",
        inputs: vec![rand_t(&mut rng, &[2, n, n], -1.0, 1.0)],
        f: Box::new(move |v| weighted(&v[0].downsample2()?, &w)),
    });
    let w = rand_t(&mut rng, &[2, n, n], -1.0, 1.0);
    out.push(Case {
        name: "upsample2",
        inputs: vec![rand_t(&mut rng, &[2, n / 2, n / 2], -1.0, 1.0)],
        f: Box::new(move |v| weighted(&v[0].upsample2()?, &w)),
    });
    let w = rand_t(&mut rng, &[2, n, n], -1.0, 1.0);
    out.push(Case {
        name: "grid_sample",
        inputs: vec![rand_t(&mut rng, &[2, n, n], -1.0, 1.0), off_grid(&mut rng, &[2, n, n], &[n, n])],
        f: Box::new(move |v| weighted(&grid_sample(&v[0], &v[1])?, &w)),
    });
    let w = rand_t(&mut rng, &[n * n, 9, 3], -1.0, 1.0);
    out.push(Case {
        name: "extract_windows",
        inputs: vec![rand_t(&mut rng, &[3, n, n], -1.0, 1.0)],
        f: Box::new(move |v| weighted(&extract_windows(&v[0], 3)?, &w)),
    });
    let w = rand_t(&mut rng, &[2, n, n], -1.0, 1.0);
    out.push(Case {
        name: "vfa_attention",
        inputs: vec![rand_t(&mut rng, &[4, n, n], -1.0, 1.0), rand_t(&mut rng, &[4, n, n], -1.0, 1.0)],
        f: Box::new(move |v| weighted(att_field(&v[0], &v[1])?.var(), &w)),
    });
    let w = rand_t(&mut rng, &[2, n, n], -1.0, 1.0);
    out.push(Case {
        name: "compose",
        inputs: vec![smooth_field(&mut rng, n, 0.4), smooth_field(&mut rng, n, 0.4)],
        f: Box::new(move |v| weighted(compose(&transform(&v[0])?, &transform(&v[1])?)?.disp_var(), &w)),
    });
    let w = rand_t(&mut rng, &[2, n, n], -1.0, 1.0);
    out.push(Case {
        name: "scaling_and_squaring",
        inputs: vec![smooth_field(&mut rng, n, 0.8)],
        f: Box::new(move |v| weighted(scaling_and_squaring(&DisplacementField::new(v[0].clone())?, 4)?.disp_var(), &w)),
    });
    let w = rand_t(&mut rng, &[2, n, n], -1.0, 1.0);
    out.push(Case {
        name: "apply_beta",
        inputs: vec![rand_t(&mut rng, &[2, n, n], -1.0, 1.0), Tensor::scalar(0.3)],
        f: Box::new(move |v| weighted(apply_beta(&DisplacementField::new(v[0].clone())?, &v[1])?.disp_var(), &w)),
    });

    let img = |rng: &mut ChaCha8Rng| rand_t(rng, &[1, n, n], 0.05, 0.95);
    out.push(Case {
        name: "ncc_loss",
        inputs: vec![img(&mut rng), img(&mut rng)],
        f: Box::new(|v| ncc_loss(&v[0], &v[1], 5)),
    });
    out.push(Case {
        name: "mi_loss",
        inputs: vec![off_bin(&mut rng, n, 16), off_bin(&mut rng, n, 16)],
        f: Box::new(|v| mi_loss(&v[0], &v[1], 16)),
    });
    out.push(Case {
        name: "diffusion_reg",
        inputs: vec![rand_t(&mut rng, &[2, n, n], -1.0, 1.0)],
        f: Box::new(|v| diffusion_reg(&v[0])),
    });
    out.push(Case {
        name: "mse_loss",
        inputs: vec![img(&mut rng), img(&mut rng)],
        f: Box::new(|v| mse_loss(&v[0], &v[1])),
    });
    out.push(Case {
        name: "dice_loss",
        inputs: vec![rand_t(&mut rng, &[3, n, n], 0.0, 1.0), rand_t(&mut rng, &[3, n, n], 0.0, 1.0)],
        f: Box::new(|v| dice_loss(&v[0], &v[1])),
    });
    let kp = {
        let pts = off_grid(&mut rng, &[2, 6], &[n, n]);
        let fixed: Vec<Vec<f64>> = (0..6).map(|p| vec![pts.get(&[0, p]), pts.get(&[1, p])]).collect();
        let moving = fixed.iter().map(|p| vec![p[0] + rng.random_range(-2.0..2.0), p[1] + 1.0]).collect();
        KeypointSet::new(fixed, moving, vec![1.5, 0.8])?
    };
    out.push(Case {
        name: "tre_loss",
        inputs: vec![smooth_field(&mut rng, n, 0.3)],
        f: Box::new(move |v| tre_loss(&transform(&v[0])?, &kp)),
    });
    Ok(out)
}

/// Intensities in `[0, 1]` placed away from the bin centres of a `bins`-bin histogram.
fn off_bin(rng: &mut ChaCha8Rng, n: usize, bins: usize) -> Tensor<f64> {
    let step = 1.0 / (bins - 1) as f64;
    Tensor::from_fn([1, n, n], |_| (rng.random_range(0..bins - 1) as f64 + rng.random_range(0.15..0.85)) * step)
}

fn att_field(f: &Var<f64>, m: &Var<f64>) -> Result<DisplacementField<f64>> {
    Ok(vfa_attention(f, m, &AttentionConfig::default())?.displacement)
}

/// The network used for the end-to-end check: `levels` levels of 4·2^i
/// channels, with β starting at 1 so parameter gradients are well above
/// finite-difference noise.
pub fn model_config(opts: &GradcheckOptions) -> ModelConfig {
    ModelConfig {
        ndim: 2,
        extractor: ExtractorConfig {
            channels: (0..opts.levels).map(|i| 4 << i).collect(),
            match_channels: 4,
            shared_weights: true,
            kernel: 3,
        },
        beta0: 1.0,
        seed: opts.seed,
        ..Default::default()
    }
}

/// NCC + diffusion loss of the full network as a function of its parameters.
fn model_case(opts: &GradcheckOptions) -> Result<Case> {
    let model = VfaModel::<f64>::new(model_config(opts))?;
    let n = opts.size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let base = smooth_image(&mut rng, n);
    let fixed = Var::constant(base.clone());
    let moving = Var::constant(shifted(&base, 0.6));
    let inputs = model.store.values();
    Ok(Case {
        name: "full_model",
        inputs,
        f: Box::new(move |v| {
            let mut m = model.clone();
            for (i, var) in v.iter().enumerate() {
                m.store.set_var(i, var.clone())?;
            }
            let reg = m.register(&fixed, &moving)?;
            let warped = crate::geometry::grid_sample(&moving, &reg.phi)?;
            Ok(ncc_loss(&fixed, &warped, 5)?.add(&diffusion_reg(reg.phi.disp_var())?)?)
        }),
    })
}

fn smooth_image(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let (a, b) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
    Tensor::from_fn([1, n, n], move |i| {
        let (y, x) = (i[1] as f64, i[2] as f64);
        0.5 + 0.25 * (0.9 * y + a).sin() + 0.2 * (0.7 * x + b).cos() * (0.3 * y).cos()
    })
}

fn shifted(t: &Tensor<f64>, s: f64) -> Tensor<f64> {
    let img = Var::constant(t.clone());
    let n = t.shape()[1];
    let coords = Var::constant(Tensor::from_fn([2, n, n], |i| i[i[0] + 1] as f64 + if i[0] == 1 { s } else { 0.0 }));
    grid_sample(&img, &coords).expect("valid shapes").value().clone()
}

/// Runs every check (or those matching the filter) and reports each.
pub fn run(opts: &GradcheckOptions, mut report: impl FnMut(&CheckOutcome)) -> Result<Vec<CheckOutcome>> {
    let divisor = 1usize << (opts.levels.max(1) - 1);
    if opts.size < 6 || opts.size % 2 != 0 || opts.size % divisor != 0 || opts.levels == 0 {
        return Err(VfaError::Parameter(format!(
            "gradient check size {} must be even, at least 6 and divisible by {divisor} for {} levels",
            opts.size, opts.levels
        )));
    }
    let mut all = cases(opts)?;
    all.push(model_case(opts)?);
    let known: Vec<&str> = all.iter().map(|c| c.name).collect();
    if let Some(bug) = &opts.inject_sign_bug {
        if !known.contains(&bug.as_str()) {
            return Err(VfaError::Parameter(format!("unknown check {bug:?}; known checks: {known:?}")));
        }
    }
    let mut outcomes = Vec::new();
    for case in all {
        if opts.filter.as_deref().is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let flip = opts.inject_sign_bug.as_deref() == Some(case.name);
        let f = &case.f;
        let rep = check_with(
            |v| f(v).map_err(|e| TensorError::Usage(e.to_string())),
            &case.inputs,
            GradCheckConfig { five_point: true, ..Default::default() },
            |_, g| if flip { g.into_iter().map(|x| -x).collect() } else { g },
        )?;
        let outcome = CheckOutcome {
            name: case.name.to_string(),
            checked: rep.checked(),
            max_rel_err: rep.max_rel_err(),
            passed: rep.max_rel_err() < opts.tolerance,
            seconds: start.elapsed().as_secs_f64(),
        };
        report(&outcome);
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
