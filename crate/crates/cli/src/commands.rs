use std::fs;
use std::path::{Path, PathBuf};

use vfa::dataio::{
    gen_synthetic_pair, load_checkpoint, read_dataset, read_keypoints, read_volume, save_checkpoint, volume_to_transform,
    write_synth_case, write_volume, Case, RunConfig, SynthSpec, Volume,
};
use vfa::geometry::{grid_sample, TransformGrid, VolumeShape};
use vfa::gradcheck::GradcheckOptions;
use vfa::metrics::{evaluate_case, jacobian_determinant, warp_labels_nearest, write_metrics_csv, CaseMetrics, LabelMap};
use vfa::model::{ModelConfig, VfaModel};
use vfa::train::{fit, write_history_csv, TrainConfig};
use vfa::{Result, VfaError};
use vfa_tensor::{Element, Var};

use crate::args::*;
use crate::pgm;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VfaError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| VfaError::io(path, e))
}

/// Single-channel image volume as a `[1, spatial..]` variable.
fn read_image<T: Element>(path: &Path) -> Result<(Var<T>, Volume)> {
    let v = read_volume(path)?;
    if v.channels != 1 {
        return Err(VfaError::Input(format!("{}: expected one channel, got {}", path.display(), v.channels)));
    }
    Ok((Var::constant(v.to_tensor()), v))
}

fn read_labels(path: &Path) -> Result<LabelMap> {
    read_volume(path)?.to_labels()
}

/// Mean displacement norm over voxels.
fn mean_norm<T: Element>(phi: &TransformGrid<T>) -> f64 {
    let u = phi.disp_var().data();
    let d = phi.ndim();
    let n = u.len() / d;
    (0..n)
        .map(|i| (0..d).map(|c| u[c * n + i].as_f64().powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

fn norms<T: Element>(u: &[T], d: usize) -> Vec<f64> {
    let n = u.len() / d;
    (0..n)
        .map(|i| (0..d).map(|c| u[c * n + i].as_f64().powi(2)).sum::<f64>().sqrt())
        .collect()
}

fn check_pair(fixed: &Volume, moving: &Volume, model_ndim: usize) -> Result<()> {
    if fixed.shape.dims != moving.shape.dims {
        return Err(VfaError::dimension(
            "register",
            format!("fixed {:?} vs moving {:?}", fixed.shape.dims, moving.shape.dims),
        ));
    }
    if fixed.shape.ndim() != model_ndim {
        return Err(VfaError::dimension(
            "register",
            format!("{}-D images for a {model_ndim}-D model", fixed.shape.ndim()),
        ));
    }
    Ok(())
}

/// Worker count for fan-out commands.
fn threads(deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    std::env::var("VFA_THREADS").ok().and_then(|s| s.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

pub fn train(a: TrainArgs) -> Result<bool> {
    let flags = RunConfig {
        train_dir: a.train_dir,
        val_dir: a.val_dir,
        out_dir: a.out,
        epochs: a.epochs,
        steps_per_epoch: a.steps_per_epoch,
        learning_rate: a.lr,
        flip_augment: a.no_flip.then_some(false),
        ..a.overrides.to_run_config()
    };
    let rc = match &a.overrides.config {
        Some(p) => RunConfig::load(p)?.merged_over(flags),
        None => flags,
    };
    let train_dir = rc.train_dir.clone().ok_or_else(|| VfaError::Usage("train needs --train-dir or `train_dir`".into()))?;
    let out = rc.out_dir.clone().ok_or_else(|| VfaError::Usage("train needs --out or `out_dir`".into()))?;

    // Validate every override before touching data.
    let train_cfg = rc.train(TrainConfig::default())?;
    rc.model(ModelConfig { ndim: rc.ndim.unwrap_or(2), ..Default::default() })?;

    let cases = read_dataset::<f32>(&train_dir)?;
    let val: Vec<Case<f32>> = match &rc.val_dir {
        Some(d) => read_dataset(d)?,
        None => Vec::new(),
    };
    for w in cases.iter().chain(&val).flat_map(|c| &c.warnings) {
        eprintln!("warning: {w}");
    }
    let dims = cases[0].pair.dims().to_vec();
    if let Some(c) = cases.iter().chain(&val).find(|c| c.pair.dims() != dims.as_slice()) {
        return Err(VfaError::dimension("train", format!("case {} has extents {:?}, expected {dims:?}", c.name, c.pair.dims())));
    }
    let model_cfg = rc.model(ModelConfig { ndim: dims.len(), ..Default::default() })?;
    if model_cfg.ndim != dims.len() {
        return Err(VfaError::dimension("train", format!("{}-D data for a {}-D model", dims.len(), model_cfg.ndim)));
    }
    model_cfg.extractor.check_extents(&dims)?;
    let mut model = VfaModel::<f32>::new(model_cfg)?;
    create_dir(&out)?;

    let train_pairs: Vec<_> = cases.iter().map(|c| c.pair.clone()).collect();
    let val_pairs: Vec<_> = val.iter().map(|c| c.pair.clone()).collect();
    let res = fit(&mut model, &train_pairs, &val_pairs, &train_cfg, |row| {
        if let Some(v) = row.val_metric {
            eprintln!("epoch {} step {} loss {:.5} beta {:.4} val {:.5}", row.epoch, row.step, row.total, row.beta, v);
        }
    })?;

    let mut history = Vec::new();
    write_history_csv(&mut history, &train_cfg.loss, &res.history).map_err(|e| VfaError::io(out.join("history.csv"), e))?;
    fs::write(out.join("history.csv"), history).map_err(|e| VfaError::io(out.join("history.csv"), e))?;
    save_checkpoint(out.join("final.ckpt"), &model)?;

    // Self-registration of every training image with the final weights.
    let mut bound: f64 = 0.0;
    for p in &train_pairs {
        for img in [&p.fixed, &p.moving] {
            let v = Var::constant(img.clone());
            bound = bound.max(mean_norm(&model.register(&v, &v)?.phi));
        }
    }

    let final_beta = model.beta();
    model.store.load_values(res.best)?;
    save_checkpoint(out.join("best.ckpt"), &model)?;
    write_text(&out.join("config.toml"), &rc.to_toml())?;
    let summary = serde_json::json!({
        "steps": res.history.len(),
        "best_epoch": res.best_epoch,
        "best_metric": res.best_metric,
        "final_beta": final_beta,
        "self_registration_bound": bound,
    });
    write_text(&out.join("summary.json"), &format!("{summary:#}\n"))?;
    eprintln!("wrote {}", out.display());
    Ok(true)
}

pub fn register(a: RegisterArgs) -> Result<bool> {
    let mut model = load_checkpoint::<f32>(&a.checkpoint)?;
    if let Some(b) = a.beta {
        if !b.is_finite() {
            return Err(VfaError::Parameter(format!("beta must be finite, got {b}")));
        }
        model.set_beta(b)?;
    }
    let (f, fv) = read_image::<f32>(&a.fixed)?;
    let (m, mv) = read_image::<f32>(&a.moving)?;
    check_pair(&fv, &mv, model.config.ndim)?;
    let reg = model.register(&f, &m)?;
    let spacing = fv.shape.spacing.clone();
    write_volume(&a.out, &Volume::from_tensor(reg.phi.disp_var().value(), spacing.clone())?)?;
    if let Some(p) = &a.save_warped {
        let w = grid_sample(&m, &reg.phi)?;
        write_volume(p, &Volume::from_tensor(w.value(), spacing.clone())?)?;
    }
    if let Some(dir) = &a.save_intermediates {
        create_dir(dir)?;
        for (i, l) in reg.levels.iter().enumerate() {
            let s: Vec<f64> = spacing.iter().map(|x| x * (1u64 << i) as f64).collect();
            let path = dir.join(format!("phi_level{}.vol", i + 1));
            write_volume(&path, &Volume::from_tensor(l.phi.disp_var().value(), s)?)?;
        }
    }
    println!("mean |u| {:.6} beta {:.6}", mean_norm(&reg.phi), model.beta());
    Ok(true)
}

pub fn warp(a: WarpArgs) -> Result<bool> {
    let tv = read_volume(&a.transform)?;
    let phi = volume_to_transform(&tv)?;
    let mv = read_volume(&a.moving)?;
    if mv.shape.ndim() != phi.ndim() {
        return Err(VfaError::dimension(
            "warp",
            format!("{}-D image for a {}-D transform", mv.shape.ndim(), phi.ndim()),
        ));
    }
    let spacing = tv.shape.spacing.clone();
    let out = if a.labels {
        let warped = warp_labels_nearest(&mv.to_labels()?, &phi)?;
        Volume::from_labels(&warped, spacing)?
    } else {
        let img = Var::constant(mv.to_tensor::<f64>());
        let w = grid_sample(&img, &phi)?;
        match mv.data {
            vfa::dataio::VolumeData::F64(_) => Volume::from_tensor(w.value(), spacing)?,
            _ => Volume::from_tensor(&w.value().cast::<f32>(), spacing)?,
        }
    };
    write_volume(&a.out, &out)?;
    Ok(true)
}

fn emit_metrics(rows: &[CaseMetrics], out: Option<&PathBuf>) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows).expect("writing to memory");
    match out {
        Some(p) => fs::write(p, buf).map_err(|e| VfaError::io(p, e)),
        None => {
            print!("{}", String::from_utf8_lossy(&buf));
            Ok(())
        }
    }
}

fn evaluate_one<T: Element>(name: &str, phi: &TransformGrid<T>, case: &Case<f32>) -> Result<CaseMetrics> {
    let p = &case.pair;
    let labels = p.fixed_labels.as_ref().zip(p.moving_labels.as_ref());
    evaluate_case(name, phi, labels, p.keypoints.as_ref(), &case.spacing)
}

pub fn evaluate(a: EvaluateArgs) -> Result<bool> {
    if let Some(dir) = &a.dataset {
        let model = match &a.checkpoint {
            Some(c) => Some(load_checkpoint::<f32>(c)?),
            None if a.ground_truth => None,
            None => return Err(VfaError::Usage("--dataset needs --checkpoint or --ground-truth".into())),
        };
        let cases = read_dataset::<f32>(dir)?;
        let workers = threads(a.deterministic).min(cases.len());
        let chunk = cases.len().div_ceil(workers);
        let model = model.as_ref();
        let results: Vec<Result<Vec<CaseMetrics>>> = std::thread::scope(|s| {
            let handles: Vec<_> = cases
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|c| match model {
                                Some(m) => {
                                    let f = Var::constant(c.pair.fixed.clone());
                                    let mv = Var::constant(c.pair.moving.clone());
                                    evaluate_one(&c.name, &m.register(&f, &mv)?.phi, c)
                                }
                                None => {
                                    let phi = c.phi_gt.as_ref().ok_or_else(|| {
                                        VfaError::Input(format!("case {} has no ground-truth transform", c.name))
                                    })?;
                                    evaluate_one(&c.name, phi, c)
                                }
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut rows = Vec::new();
        for r in results {
            rows.extend(r?);
        }
        emit_metrics(&rows, a.out.as_ref())?;
        return Ok(true);
    }

    let tpath = a.transform.as_ref().ok_or_else(|| VfaError::Usage("evaluate needs --transform or --dataset".into()))?;
    let tv = read_volume(tpath)?;
    let phi = volume_to_transform(&tv)?;
    let spacing = a.spacing.clone().unwrap_or_else(|| tv.shape.spacing.clone());
    VolumeShape::new(phi.dims().to_vec(), spacing.clone())?;
    let labels = match (&a.fixed_labels, &a.moving_labels) {
        (Some(f), Some(m)) => Some((read_labels(f)?, read_labels(m)?)),
        _ => None,
    };
    let keypoints = match &a.keypoints {
        Some(p) => {
            let parsed = read_keypoints(p, &spacing)?;
            for w in parsed.warnings {
                eprintln!("warning: {}: {w}", p.display());
            }
            Some(parsed.set)
        }
        None => None,
    };
    if labels.is_none() && keypoints.is_none() && phi.dims().iter().any(|&n| n < 3) {
        return Err(VfaError::Usage(
            "nothing to evaluate: give labels or keypoints, or a transform of at least 3 voxels per axis".into(),
        ));
    }
    let row = evaluate_case(&a.case, &phi, labels.as_ref().map(|(f, m)| (f, m)), keypoints.as_ref(), &spacing)?;
    emit_metrics(&[row], a.out.as_ref())?;
    Ok(true)
}

pub fn synth(a: SynthArgs) -> Result<bool> {
    let spacing = a.spacing.clone().unwrap_or_else(|| vec![1.0; a.dims.len()]);
    VolumeShape::new(a.dims.clone(), spacing.clone())?;
    create_dir(&a.out)?;
    for i in 0..a.count {
        let spec = SynthSpec {
            kind: a.kind.into(),
            dims: a.dims.clone(),
            smoothness: a.smoothness,
            max_displacement: a.max_displacement,
            keypoints: a.keypoints,
            seed: a.seed + i as u64,
            ..Default::default()
        };
        let pair = gen_synthetic_pair(&spec)?;
        write_synth_case(a.out.join(format!("case_{i:03}")), &pair, &spacing)?;
    }
    eprintln!("wrote {} case(s) to {}", a.count, a.out.display());
    Ok(true)
}

pub fn inspect(a: InspectArgs) -> Result<bool> {
    let model = load_checkpoint::<f32>(&a.checkpoint)?;
    let (f, fv) = read_image::<f32>(&a.fixed)?;
    let (m, mv) = read_image::<f32>(&a.moving)?;
    check_pair(&fv, &mv, model.config.ndim)?;
    let reg = model.register(&f, &m)?;
    create_dir(&a.out)?;
    let d = model.config.ndim;
    let temperature = model.config.attention.temperature.resolve(model.config.extractor.match_channels);
    let mut csv = String::from("level,extents,temperature,sparsity,mean_abs_u,max_abs_u,beta\n");
    for (i, l) in reg.levels.iter().enumerate() {
        let dims = l.phi.dims().to_vec();
        let u = norms(l.local.var().data(), d);
        let weights = l.weights.value();
        let k = weights.shape()[1];
        let peak: Vec<f64> =
            weights.data().chunks(k).map(|row| row.iter().fold(0.0f64, |a, v| a.max(v.as_f64()))).collect();
        let sparsity = vfa::attention::sparsity(weights)?;
        let extents = dims.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x");
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        let max = u.iter().cloned().fold(0.0, f64::max);
        csv.push_str(&format!("{},{extents},{temperature},{sparsity},{mean},{max},{}\n", i + 1, model.beta()));
        let (r, c, s) = pgm::slice(&dims, &u);
        pgm::write(&a.out.join(format!("u_level{}.pgm", i + 1)), r, c, &s)?;
        let (r, c, s) = pgm::slice(&dims, &peak);
        pgm::write(&a.out.join(format!("sparsity_level{}.pgm", i + 1)), r, c, &s)?;
    }
    write_text(&a.out.join("attention.csv"), &csv)?;
    let phi_norm = norms(reg.phi.disp_var().data(), d);
    let (r, c, s) = pgm::slice(reg.phi.dims(), &phi_norm);
    pgm::write(&a.out.join("u_final.pgm"), r, c, &s)?;
    if reg.phi.dims().iter().all(|&n| n >= 3) {
        let jac = jacobian_determinant(&reg.phi)?;
        let (r, c, s) = pgm::slice(&jac.dims, &jac.values);
        pgm::write(&a.out.join("jacobian.pgm"), r, c, &s)?;
    }
    print!("{csv}");
    Ok(true)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let opts = GradcheckOptions {
        size: a.size,
        levels: a.levels,
        tolerance: a.tolerance,
        seed: a.seed,
        inject_sign_bug: a.inject,
        filter: a.filter,
    };
    println!("{:<22} {:>8} {:>12} {:>8} {:>6}", "check", "elements", "max_rel_err", "seconds", "status");
    let results = vfa::gradcheck::run(&opts, |r| {
        println!(
            "{:<22} {:>8} {:>12.3e} {:>8.2} {:>6}",
            r.name,
            r.checked,
            r.max_rel_err,
            r.seconds,
            if r.passed { "ok" } else { "FAIL" }
        );
    })?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed (tolerance {:e})", results.len(), opts.tolerance);
        Ok(true)
    } else {
        println!("FAILED: {}", failed.join(", "));
        Ok(false)
    }
}
