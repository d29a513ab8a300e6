mod common;

use std::path::Path;

use common::rng;
use rand::Rng;
use vfa::dataio::*;
use vfa::geometry::VolumeShape;
use vfa::model::{ModelConfig, VfaModel};
use vfa::VfaError;

fn random_volume(seed: u64) -> Volume {
    let mut r = rng(seed);
    let data: Vec<f32> = (0..512).map(|_| r.random_range(-1e3f32..1e3)).collect();
    Volume::new(VolumeShape::new(vec![8, 8, 8], vec![1.5, 1.5, 2.0]).unwrap(), 1, VolumeData::F32(data)).unwrap()
}

#[test]
fn volume_round_trip_is_bitwise() {
    let v = random_volume(1);
    let back = parse_volume(&v.to_bytes()).unwrap();
    assert_eq!(back.shape.spacing, vec![1.5, 1.5, 2.0]);
    let (VolumeData::F32(a), VolumeData::F32(b)) = (&v.data, &back.data) else { panic!("dtype changed") };
    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(back.to_bytes(), v.to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.vol");
    write_volume(&path, &v).unwrap();
    assert_eq!(read_volume(&path).unwrap(), v);
}

#[test]
fn volume_round_trips_other_dtypes() {
    let shape = VolumeShape::new(vec![3, 5], vec![0.7, 1.25]).unwrap();
    let f = Volume::new(shape.clone(), 2, VolumeData::F64((0..30).map(|i| i as f64 / 7.0).collect())).unwrap();
    assert_eq!(parse_volume(&f.to_bytes()).unwrap(), f);
    let l = Volume::new(shape, 1, VolumeData::I32((0..15).collect())).unwrap();
    assert_eq!(parse_volume(&l.to_bytes()).unwrap(), l);
}

#[test]
fn zero_extent_is_rejected() {
    let text = b"VFA-VOLUME 1\ndims 4 0\nspacing 1 1\nchannels 1\ndtype f32\nbyteorder little\nend\n";
    assert!(matches!(parse_volume(text), Err(VfaError::Parse { line: 2, .. })));
}

#[test]
fn truncated_payload_reports_byte_counts() {
    let bytes = random_volume(2).to_bytes();
    let err = parse_volume(&bytes[..bytes.len() - 10]).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, VfaError::Corrupt(_)), "{err:?}");
    assert!(msg.contains("2038") && msg.contains("2048"), "{msg}");
}

#[test]
fn every_prefix_of_a_volume_fails_cleanly() {
    let bytes = random_volume(3).to_bytes();
    for n in 0..bytes.len() {
        assert!(parse_volume(&bytes[..n]).is_err(), "prefix {n} parsed");
    }
}

#[test]
fn keypoint_examples() {
    let p = parse_keypoints("1,2,3,4\n5,6,7,8\n", &[1.0, 1.0]).unwrap();
    assert_eq!(p.set.len(), 2);
    assert_eq!(p.set.fixed[1], vec![5.0, 6.0]);
    assert_eq!(p.set.moving[0], vec![3.0, 4.0]);

    let p = parse_keypoints("fx,fy,fz,mx,my,mz\n", &[1.0, 1.0, 1.0]).unwrap();
    assert!(p.set.is_empty());
    assert_eq!(p.warnings.len(), 1);

    let err = parse_keypoints("fx,fy,mx,my\n1,2,3,4\n1,x,3,4\n", &[1.0, 1.0]).unwrap_err();
    assert!(matches!(err, VfaError::Parse { line: 3, .. }), "{err:?}");
    assert!(err.to_string().contains("line 3"));

    let err = parse_keypoints("1,2,3,4\n1,2,3\n", &[1.0, 1.0]).unwrap_err();
    assert!(matches!(err, VfaError::Parse { line: 2, .. }), "{err:?}");
}

#[test]
fn keypoints_round_trip() {
    let spacing = [0.5, 1.0, 2.0];
    let p = parse_keypoints("10.5,2,3,11,2.25,3\n0,0,0,1,1,1\n", &spacing).unwrap();
    let text = vfa::dataio::keypoints::format_keypoints(&p.set);
    assert_eq!(parse_keypoints(&text, &spacing).unwrap().set, p.set);
}

fn spec(seed: u64, magnitude: f64) -> SynthSpec {
    SynthSpec { kind: ImageKind::Blobs, dims: vec![32, 32], max_displacement: magnitude, seed, ..Default::default() }
}

#[test]
fn zero_magnitude_gives_identical_images() {
    let p = gen_synthetic_pair(&spec(1, 0.0)).unwrap();
    assert_eq!(p.fixed, p.moving);
    assert!(p.phi.disp_var().data().iter().all(|&v| v == 0.0));
}

#[test]
fn synthesis_is_reproducible() {
    for kind in [ImageKind::Blobs, ImageKind::CheckerOrgans, ImageKind::Texture] {
        let s = SynthSpec { kind, ..spec(4, 3.0) };
        let a = gen_synthetic_pair(&s).unwrap();
        let b = gen_synthetic_pair(&s).unwrap();
        assert_eq!(a.fixed, b.fixed);
        assert_eq!(a.moving, b.moving);
        assert_eq!(a.phi.disp_var().data(), b.phi.disp_var().data());
        assert_eq!(a.fixed_labels, b.fixed_labels);
        assert_eq!(a.keypoints, b.keypoints);
    }
}

#[test]
fn synthetic_fields_respect_magnitude_and_never_fold() {
    for (seed, dims) in [(5, vec![32, 32]), (6, vec![16, 16, 16])] {
        for magnitude in [1.0, 4.0] {
            let s = SynthSpec { dims: dims.clone(), ..spec(seed, magnitude) };
            let p = gen_synthetic_pair(&s).unwrap();
            let u = p.phi.disp_var().data();
            let n: usize = dims.iter().product();
            let d = dims.len();
            let worst = (0..n)
                .map(|i| (0..d).map(|c| u[c * n + i].powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            assert!(worst <= magnitude + 1e-6, "{worst} > {magnitude}");
            assert!(worst > 0.5 * magnitude);
            assert_eq!(common::nd_voxels(&p.phi), 0);
        }
    }
}

#[test]
fn impossible_magnitude_is_a_parameter_error() {
    let s = SynthSpec { smoothness: 1.0, max_displacement: 40.0, max_retries: 2, ..spec(7, 0.0) };
    assert!(matches!(gen_synthetic_pair(&s), Err(VfaError::Parameter(_))));
}

#[test]
fn synth_case_round_trips_through_the_dataset_reader() {
    let dir = tempfile::tempdir().unwrap();
    let p = gen_synthetic_pair(&spec(8, 2.0)).unwrap();
    write_synth_case(dir.path().join("case0"), &p, &[1.0, 1.0]).unwrap();
    let cases = read_dataset::<f64>(dir.path()).unwrap();
    assert_eq!(cases.len(), 1);
    assert_eq!(cases[0].pair.fixed_labels.as_ref(), Some(&p.fixed_labels));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig {
        ndim: 2,
        extractor: vfa::extractor::ExtractorConfig { channels: vec![3, 4], match_channels: 2, ..Default::default() },
        beta0: 0.37,
        seed: 3,
        ..Default::default()
    };
    let model = VfaModel::<f32>::new(cfg).unwrap();
    let bytes = Checkpoint::from_model(&model).to_bytes();
    let back: VfaModel<f32> = parse_checkpoint(&bytes).unwrap().into_model().unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.store.values(), model.store.values());
    assert_eq!(Checkpoint::from_model(&back).to_bytes(), bytes);
    for n in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(parse_checkpoint(&bytes[..n]).is_err());
    }
}

#[test]
fn run_config_round_trip_and_errors() {
    let text = "preset = \"multimodal\"\ntemperature = 0.05\nchannels = [4, 8]\nweights = { mi = 2.0 }\nseed = 3\n";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    let loss = cfg.loss().unwrap();
    assert_eq!(vfa::train::history_header(&loss), "epoch,step,total,mi@2,diffusion@0.2,beta,val_metric");
    let err = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
    assert!(matches!(err, VfaError::Parse { line: 2, .. }), "{err:?}");
}

/// Runs every checked-in fuzz seed through its parser.
#[test]
fn fuzz_corpus_seeds_do_not_panic() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let mut seen = 0;
    for (target, parse) in [
        ("parse_volume", (|b: &[u8]| parse_volume(b).is_ok()) as fn(&[u8]) -> bool),
        ("parse_keypoints", |b| parse_keypoints(&String::from_utf8_lossy(b), &[1.0, 1.0, 1.0]).is_ok()),
        ("parse_checkpoint", |b| parse_checkpoint(b).is_ok()),
        ("parse_run_config", |b| RunConfig::parse(&String::from_utf8_lossy(b)).is_ok()),
    ] {
        let dir = root.join(target);
        for entry in std::fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())) {
            let bytes = std::fs::read(entry.unwrap().path()).unwrap();
            let _ = parse(&bytes);
            seen += 1;
            // Cheap stand-in for a fuzzing session: byte flips, deletions and insertions.
            let mut r = rng(seen);
            for _ in 0..300 {
                let mut b = bytes.clone();
                for _ in 0..r.random_range(1..4) {
                    let at = r.random_range(0..b.len().max(1));
                    match r.random_range(0..3) {
                        0 if !b.is_empty() => b[at] = r.random(),
                        1 if !b.is_empty() => {
                            b.remove(at);
                        }
                        _ => b.insert(at.min(b.len()), r.random()),
                    }
                }
                let _ = parse(&b);
            }
        }
    }
    assert!(seen >= 8);
}
