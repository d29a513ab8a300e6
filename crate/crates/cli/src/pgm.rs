use std::path::Path;

use vfa::{Result, VfaError};

/// Writes a binary 8-bit PGM of a row-major `rows × cols` map, scaled so
/// that its minimum is black and its maximum white. Constant maps are black.
pub fn write(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if range > 0.0 && range.is_finite() {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    std::fs::write(path, out).map_err(|e| VfaError::io(path, e))
}

/// A 2D view of a map: the map itself in 2D, the central slice along the
/// first axis in 3D.
pub fn slice(dims: &[usize], values: &[f64]) -> (usize, usize, Vec<f64>) {
    match dims {
        [r, c] => (*r, *c, values.to_vec()),
        [d, r, c] => {
            let plane = r * c;
            let z = d / 2;
            (*r, *c, values[z * plane..(z + 1) * plane].to_vec())
        }
        _ => (1, values.len(), values.to_vec()),
    }
}
