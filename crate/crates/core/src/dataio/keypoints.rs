//! Keypoint CSV: one landmark pair per row, `fx,fy[,fz],mx,my[,mz]`,
//! voxel units. An optional first row of column names is skipped.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, VfaError};
use crate::geometry::KeypointSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedKeypoints {
    pub set: KeypointSet,
    pub warnings: Vec<String>,
}

fn is_header(record: &csv::StringRecord) -> bool {
    record
        .get(0)
        .is_some_and(|f| f.trim().starts_with(|c: char| c.is_ascii_alphabetic()) && f.trim().parse::<f64>().is_err())
}

/// Parses keypoints for a volume with the given spacing (one entry per axis).
pub fn parse_keypoints(text: &str, spacing: &[f64]) -> Result<ParsedKeypoints> {
    let d = spacing.len();
    let cols = 2 * d;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut fixed = Vec::new();
    let mut moving = Vec::new();
    let mut warnings = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| VfaError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 && is_header(&rec) {
            if rec.len() != cols {
                return Err(VfaError::Parse {
                    line,
                    msg: format!("header has {} columns, {d}-D keypoints need {cols}", rec.len()),
                });
            }
            continue;
        }
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != cols {
            return Err(VfaError::Parse {
                line,
                msg: format!("expected {cols} columns, found {}", rec.len()),
            });
        }
        let vals = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| VfaError::Parse {
                    line,
                    msg: format!("{f:?} is not a finite number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        fixed.push(vals[..d].to_vec());
        moving.push(vals[d..].to_vec());
    }
    if fixed.is_empty() {
        warnings.push("keypoint file contains no keypoints".to_string());
    }
    Ok(ParsedKeypoints {
        set: KeypointSet::new(fixed, moving, spacing.to_vec())?,
        warnings,
    })
}

pub fn read_keypoints(path: impl AsRef<Path>, spacing: &[f64]) -> Result<ParsedKeypoints> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| VfaError::io(path, e))?;
    parse_keypoints(&text, spacing)
}

pub fn format_keypoints(kp: &KeypointSet) -> String {
    let names = ["x", "y", "z"];
    let d = kp.ndim();
    let mut out = String::new();
    let header: Vec<String> = ["f", "m"]
        .iter()
        .flat_map(|p| names[..d].iter().map(move |n| format!("{p}{n}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (f, m) in kp.fixed.iter().zip(&kp.moving) {
        let row: Vec<String> = f.iter().chain(m).map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_keypoints(path: impl AsRef<Path>, kp: &KeypointSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_keypoints(kp)).map_err(|e| VfaError::io(path, e))
}
