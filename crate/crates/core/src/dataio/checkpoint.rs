//! Model checkpoints.
//!
//! ```text
//! VFA-CHECKPOINT 1
//! config {"ndim":2,...}
//! tensor extractor.enc0.0.weight f32 8 1 3 3
//! tensor beta f32
//! end
//! ```
//!
//! `config` holds the model configuration as one line of JSON. Each
//! `tensor` line names a parameter and its extents (none for a scalar).
//! The payload follows `end`: every tensor's values in header order,
//! f32 little-endian.

use std::path::Path;

use vfa_tensor::{Element, Tensor};

use super::volume::next_line;
use crate::error::{Result, VfaError};
use crate::model::{ModelConfig, VfaModel};

pub const CHECKPOINT_MAGIC: &str = "VFA-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &VfaModel<T>) -> Self {
        let tensors = model
            .store
            .iter()
            .map(|(name, v)| NamedTensor {
                name: name.to_string(),
                shape: v.shape().to_vec(),
                data: v.data().iter().map(|x| x.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint {
            config: model.config.clone(),
            tensors,
        }
    }

    /// Rebuilds the model and loads every stored tensor into it. Names
    /// and shapes must match the configured architecture exactly.
    pub fn into_model<T: Element>(self) -> Result<VfaModel<T>> {
        let mut model = VfaModel::<T>::new(self.config)?;
        if self.tensors.len() != model.store.len() {
            return Err(VfaError::Corrupt(format!(
                "checkpoint has {} tensors, the configured model has {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for t in self.tensors {
            let idx = model
                .store
                .index_of(&t.name)
                .ok_or_else(|| VfaError::Corrupt(format!("unknown parameter {:?}", t.name)))?;
            let value = Tensor::new(t.shape, t.data.iter().map(|&v| T::of(v as f64)).collect())?;
            model.store.set(idx, value).map_err(|e| VfaError::Corrupt(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{CHECKPOINT_MAGIC}\nconfig {}\n",
            serde_json::to_string(&self.config).expect("config serialises")
        );
        for t in &self.tensors {
            out.push_str(&format!("tensor {} f32", t.name));
            for d in &t.shape {
                out.push_str(&format!(" {d}"));
            }
            out.push('\n');
        }
        out.push_str("end\n");
        let mut bytes = out.into_bytes();
        for t in &self.tensors {
            t.data.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        bytes
    }
}

/// Upper bound on values per tensor accepted from a header.
const MAX_VALUES: usize = 1 << 31;

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let magic = next_line(bytes, &mut pos, 1)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(VfaError::Parse {
            line: 1,
            msg: format!("expected {CHECKPOINT_MAGIC:?}, found {magic:?}"),
        });
    }
    let cfg_line = next_line(bytes, &mut pos, 2)?;
    let json = cfg_line.strip_prefix("config ").ok_or_else(|| VfaError::Parse {
        line: 2,
        msg: "expected `config <json>`".into(),
    })?;
    let config: ModelConfig = serde_json::from_str(json).map_err(|e| VfaError::Parse {
        line: 2,
        msg: format!("bad model configuration: {e}"),
    })?;
    let mut specs = Vec::new();
    let mut total = 0usize;
    let mut line = 3;
    loop {
        let text = next_line(bytes, &mut pos, line)?;
        if text == "end" {
            break;
        }
        let parts: Vec<&str> = text.split_ascii_whitespace().collect();
        if parts.len() < 3 || parts[0] != "tensor" || parts[2] != "f32" {
            return Err(VfaError::Parse {
                line,
                msg: format!("expected `tensor <name> f32 <extents..>`, found {text:?}"),
            });
        }
        let shape = parts[3..]
            .iter()
            .map(|t| t.parse::<usize>().ok().filter(|&d| d > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| VfaError::Parse { line, msg: "extents must be positive integers".into() })?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= MAX_VALUES)
            .ok_or_else(|| VfaError::Parse { line, msg: "tensor too large".into() })?;
        total = total.checked_add(n).ok_or_else(|| VfaError::Corrupt("declared size overflows".into()))?;
        specs.push((parts[1].to_string(), shape, n));
        line += 1;
    }
    let payload = &bytes[pos..];
    if Some(payload.len()) != total.checked_mul(4) {
        return Err(VfaError::Corrupt(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            total.saturating_mul(4)
        )));
    }
    let mut offset = 0;
    let tensors = specs
        .into_iter()
        .map(|(name, shape, n)| {
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            NamedTensor { name, shape, data }
        })
        .collect();
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint<T: Element>(path: impl AsRef<Path>, model: &VfaModel<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, Checkpoint::from_model(model).to_bytes()).map_err(|e| VfaError::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<VfaModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| VfaError::io(path, e))?;
    parse_checkpoint(&bytes)?.into_model()
}
