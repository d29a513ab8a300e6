use std::path::PathBuf;

use thiserror::Error;
use vfa_tensor::TensorError;

pub type Result<T, E = VfaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VfaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Operand shapes disagree.
    #[error("{op}: shape mismatch: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// A configuration value is outside its domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data is unusable as given.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file parsed far enough to be recognised but its contents are inconsistent.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// Text input rejected at a specific line (1-based).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss: {0}")]
    NonFinite(String),
}

impl VfaError {
    pub fn dimension(op: &'static str, msg: impl Into<String>) -> Self {
        VfaError::Dimension { op, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VfaError::Io {
            path: path.into(),
            source,
        }
    }
}
