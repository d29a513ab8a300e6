//! The volume container: a text header followed by a raw payload.
//!
//! ```text
//! VFA-VOLUME 1
//! dims 8 8 8
//! spacing 1.5 1.5 2
//! channels 1
//! dtype f32
//! byteorder little
//! end
//! ```
//!
//! Header lines end with `\n` and appear in exactly this order. The
//! payload follows the `end` line directly: `channels × Π dims` values,
//! channel-major then row-major over `dims`, little-endian. `dtype` is
//! one of `f32`, `f64`, `i32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use vfa_tensor::{Element, Tensor};

use crate::error::{Result, VfaError};
use crate::geometry::VolumeShape;
use crate::metrics::LabelMap;

pub const VOLUME_MAGIC: &str = "VFA-VOLUME 1";

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl VolumeData {
    pub fn dtype(&self) -> &'static str {
        match self {
            VolumeData::F32(_) => "f32",
            VolumeData::F64(_) => "f64",
            VolumeData::I32(_) => "i32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::F64(v) => v.len(),
            VolumeData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn as_f64(&self) -> Vec<f64> {
        match self {
            VolumeData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VolumeData::F64(v) => v.clone(),
            VolumeData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: VolumeShape,
    pub channels: usize,
    pub data: VolumeData,
}

fn dtype_size(name: &str) -> Option<usize> {
    match name {
        "f32" | "i32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

impl Volume {
    pub fn new(shape: VolumeShape, channels: usize, data: VolumeData) -> Result<Self> {
        let want = shape.numel().checked_mul(channels).filter(|&n| n > 0);
        if want != Some(data.len()) {
            return Err(VfaError::Input(format!(
                "{channels} channel(s) of extents {:?} need {} values, got {}",
                shape.dims,
                shape.numel() * channels,
                data.len()
            )));
        }
        Ok(Volume { shape, channels, data })
    }

    /// Wraps a `[C, spatial..]` tensor, keeping its precision.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, spacing: Vec<f64>) -> Result<Self> {
        let shape = VolumeShape::new(t.shape()[1..].to_vec(), spacing)?;
        let data = match T::DTYPE {
            vfa_tensor::DType::F32 => VolumeData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            vfa_tensor::DType::F64 => VolumeData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self::new(shape, t.shape()[0], data)
    }

    pub fn from_labels(labels: &LabelMap, spacing: Vec<f64>) -> Result<Self> {
        Self::new(VolumeShape::new(labels.dims.clone(), spacing)?, 1, VolumeData::I32(labels.data.clone()))
    }

    /// `[C, spatial..]` tensor of any precision.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let mut shape = vec![self.channels];
        shape.extend_from_slice(&self.shape.dims);
        Tensor::from_f64(shape, &self.data.as_f64()).expect("validated volume")
    }

    /// Single-channel integral volume as a label map.
    pub fn to_labels(&self) -> Result<LabelMap> {
        if self.channels != 1 {
            return Err(VfaError::Input(format!("label volumes have one channel, got {}", self.channels)));
        }
        let data = match &self.data {
            VolumeData::I32(v) => v.clone(),
            other => other
                .as_f64()
                .into_iter()
                .map(|x| {
                    if x.fract() == 0.0 && x >= 0.0 && x <= i32::MAX as f64 {
                        Ok(x as i32)
                    } else {
                        Err(VfaError::Input(format!("label value {x} is not a nonnegative integer")))
                    }
                })
                .collect::<Result<_>>()?,
        };
        LabelMap::new(self.shape.dims.clone(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let fmt_list = |v: &[String]| v.join(" ");
        let mut out = Vec::new();
        let header = format!(
            "{VOLUME_MAGIC}\ndims {}\nspacing {}\nchannels {}\ndtype {}\nbyteorder little\nend\n",
            fmt_list(&self.shape.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>()),
            fmt_list(&self.shape.spacing.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>()),
            self.channels,
            self.data.dtype()
        );
        out.extend_from_slice(header.as_bytes());
        match &self.data {
            VolumeData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VolumeData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VolumeData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }
}

/// Splits off the next `\n`-terminated header line.
pub(crate) fn next_line<'a>(bytes: &'a [u8], pos: &mut usize, line: usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| VfaError::Parse {
        line,
        msg: "header ends before the `end` line".into(),
    })?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| VfaError::Parse {
        line,
        msg: "header is not valid UTF-8".into(),
    })
}

pub(crate) fn keyed<'a>(text: &'a str, key: &str, line: usize) -> Result<Vec<&'a str>> {
    let mut parts = text.split_ascii_whitespace();
    match parts.next() {
        Some(k) if k == key => Ok(parts.collect()),
        _ => Err(VfaError::Parse {
            line,
            msg: format!("expected `{key} ...`, found {text:?}"),
        }),
    }
}

fn single<'a>(vals: &[&'a str], key: &str, line: usize) -> Result<&'a str> {
    match vals {
        [v] => Ok(v),
        _ => Err(VfaError::Parse {
            line,
            msg: format!("`{key}` takes exactly one value"),
        }),
    }
}

/// Parses a complete volume file.
pub fn parse_volume(bytes: &[u8]) -> Result<Volume> {
    let mut pos = 0;
    let magic = next_line(bytes, &mut pos, 1)?;
    if magic != VOLUME_MAGIC {
        return Err(VfaError::Parse {
            line: 1,
            msg: format!("expected {VOLUME_MAGIC:?}, found {magic:?}"),
        });
    }
    let dims_line = next_line(bytes, &mut pos, 2)?;
    let dims = keyed(dims_line, "dims", 2)?
        .iter()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| VfaError::Parse { line: 2, msg: format!("bad extent: {e}") })?;
    if dims.contains(&0) {
        return Err(VfaError::Parse { line: 2, msg: format!("extents must be positive, got {dims:?}") });
    }
    let spacing_line = next_line(bytes, &mut pos, 3)?;
    let spacing = keyed(spacing_line, "spacing", 3)?
        .iter()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| VfaError::Parse { line: 3, msg: format!("bad spacing: {e}") })?;
    let shape = VolumeShape::new(dims, spacing).map_err(|e| VfaError::Parse { line: 3, msg: e.to_string() })?;
    let ch_line = next_line(bytes, &mut pos, 4)?;
    let channels: usize = single(&keyed(ch_line, "channels", 4)?, "channels", 4)?
        .parse()
        .ok()
        .filter(|&c| c > 0)
        .ok_or_else(|| VfaError::Parse { line: 4, msg: "channel count must be a positive integer".into() })?;
    let dt_line = next_line(bytes, &mut pos, 5)?;
    let dtype = single(&keyed(dt_line, "dtype", 5)?, "dtype", 5)?.to_string();
    let size = dtype_size(&dtype).ok_or_else(|| VfaError::Parse {
        line: 5,
        msg: format!("unsupported dtype {dtype:?}; expected f32, f64 or i32"),
    })?;
    let bo_line = next_line(bytes, &mut pos, 6)?;
    if single(&keyed(bo_line, "byteorder", 6)?, "byteorder", 6)? != "little" {
        return Err(VfaError::Parse { line: 6, msg: "only little-endian payloads are supported".into() });
    }
    if next_line(bytes, &mut pos, 7)? != "end" {
        return Err(VfaError::Parse { line: 7, msg: "expected `end`".into() });
    }
    let count = shape
        .dims
        .iter()
        .try_fold(channels, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(size).is_some())
        .ok_or_else(|| VfaError::Corrupt("declared volume size overflows".into()))?;
    let expected = count * size;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(VfaError::Corrupt(format!(
            "payload holds {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    let data = match dtype.as_str() {
        "f32" => VolumeData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        "f64" => VolumeData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        _ => VolumeData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Volume::new(shape, channels, data)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| VfaError::io(path, e))?;
    parse_volume(&bytes).map_err(|e| match e {
        VfaError::Parse { line, msg } => VfaError::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        VfaError::Corrupt(msg) => VfaError::Corrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| VfaError::io(path, e))?;
    f.write_all(&v.to_bytes()).map_err(|e| VfaError::io(path, e))
}
