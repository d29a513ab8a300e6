//! Directory layout of a registration dataset.
//!
//! One subdirectory per case, read in name order:
//!
//! ```text
//! <root>/<case>/fixed.vol          required, one channel
//! <root>/<case>/moving.vol         required, one channel
//! <root>/<case>/fixed_labels.vol   optional, i32
//! <root>/<case>/moving_labels.vol  optional, i32
//! <root>/<case>/keypoints.csv      optional
//! <root>/<case>/phi_gt.vol         optional ground-truth displacement
//! ```
//!
//! The spacing of `fixed.vol` applies to the whole case.

use std::path::{Path, PathBuf};

use vfa_tensor::{Element, Tensor, Var};

use super::keypoints::{read_keypoints, write_keypoints};
use super::synth::SynthPair;
use super::volume::{read_volume, write_volume, Volume};
use crate::error::{Result, VfaError};
use crate::geometry::{DisplacementField, TransformGrid};
use crate::train::Pair;

pub const FIXED: &str = "fixed.vol";
pub const MOVING: &str = "moving.vol";
pub const FIXED_LABELS: &str = "fixed_labels.vol";
pub const MOVING_LABELS: &str = "moving_labels.vol";
pub const KEYPOINTS: &str = "keypoints.csv";
pub const PHI_GT: &str = "phi_gt.vol";

#[derive(Debug, Clone)]
pub struct Case<T: Element> {
    pub name: String,
    pub pair: Pair<T>,
    pub spacing: Vec<f64>,
    pub phi_gt: Option<TransformGrid<f64>>,
    pub warnings: Vec<String>,
}

fn single_channel(v: &Volume, path: &Path) -> Result<()> {
    if v.channels != 1 {
        return Err(VfaError::Input(format!("{}: expected one channel, got {}", path.display(), v.channels)));
    }
    Ok(())
}

/// Displacement volume `[d, spatial..]` as a transform.
pub fn volume_to_transform(v: &Volume) -> Result<TransformGrid<f64>> {
    if v.channels != v.shape.ndim() {
        return Err(VfaError::dimension(
            "transform",
            format!("a {}-D displacement needs {} channels, got {}", v.shape.ndim(), v.shape.ndim(), v.channels),
        ));
    }
    Ok(TransformGrid::from_displacement(DisplacementField::new(Var::constant(v.to_tensor::<f64>()))?))
}

pub fn read_case<T: Element>(dir: &Path) -> Result<Case<T>> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let fp = dir.join(FIXED);
    let mp = dir.join(MOVING);
    let fixed = read_volume(&fp)?;
    let moving = read_volume(&mp)?;
    single_channel(&fixed, &fp)?;
    single_channel(&moving, &mp)?;
    if fixed.shape.dims != moving.shape.dims {
        return Err(VfaError::dimension(
            "case",
            format!("{name}: fixed {:?} vs moving {:?}", fixed.shape.dims, moving.shape.dims),
        ));
    }
    let spacing = fixed.shape.spacing.clone();
    let mut pair = Pair::new(fixed.to_tensor::<T>(), moving.to_tensor::<T>())?;
    let mut warnings = Vec::new();
    let labels = |file: &str| -> Result<Option<crate::metrics::LabelMap>> {
        let p = dir.join(file);
        if !p.exists() {
            return Ok(None);
        }
        let l = read_volume(&p)?.to_labels()?;
        if l.dims != fixed.shape.dims {
            return Err(VfaError::dimension("labels", format!("{}: {:?} vs image {:?}", p.display(), l.dims, fixed.shape.dims)));
        }
        Ok(Some(l))
    };
    pair.fixed_labels = labels(FIXED_LABELS)?;
    pair.moving_labels = labels(MOVING_LABELS)?;
    let kp = dir.join(KEYPOINTS);
    if kp.exists() {
        let parsed = read_keypoints(&kp, &spacing)?;
        warnings.extend(parsed.warnings.into_iter().map(|w| format!("{}: {w}", kp.display())));
        pair.keypoints = Some(parsed.set);
    }
    let gt = dir.join(PHI_GT);
    let phi_gt = if gt.exists() { Some(volume_to_transform(&read_volume(&gt)?)?) } else { None };
    Ok(Case {
        name,
        pair,
        spacing,
        phi_gt,
        warnings,
    })
}

/// Every case directory under `root`, sorted by name.
pub fn read_dataset<T: Element>(root: impl AsRef<Path>) -> Result<Vec<Case<T>>> {
    let root = root.as_ref();
    let entries = std::fs::read_dir(root).map_err(|e| VfaError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(FIXED).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(VfaError::Input(format!(
            "{}: no case directories containing {FIXED}",
            root.display()
        )));
    }
    dirs.iter().map(|d| read_case(d)).collect()
}

/// Writes a synthetic pair in the dataset layout.
pub fn write_synth_case(dir: impl AsRef<Path>, pair: &SynthPair, spacing: &[f64]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| VfaError::io(dir, e))?;
    let sp = spacing.to_vec();
    let f32_vol = |t: &Tensor<f64>| Volume::from_tensor(&t.cast::<f32>(), sp.clone());
    write_volume(dir.join(FIXED), &f32_vol(&pair.fixed)?)?;
    write_volume(dir.join(MOVING), &f32_vol(&pair.moving)?)?;
    write_volume(dir.join(FIXED_LABELS), &Volume::from_labels(&pair.fixed_labels, sp.clone())?)?;
    write_volume(dir.join(MOVING_LABELS), &Volume::from_labels(&pair.moving_labels, sp.clone())?)?;
    let mut kp = pair.keypoints.clone();
    kp.spacing = sp.clone();
    write_keypoints(dir.join(KEYPOINTS), &kp)?;
    write_volume(dir.join(PHI_GT), &Volume::from_tensor(pair.phi.disp_var().value(), sp)?)?;
    Ok(())
}
