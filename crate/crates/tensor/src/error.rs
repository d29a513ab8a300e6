use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes do not conform.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar or structural parameter is outside its domain.
    #[error("{op}: invalid parameter: {msg}")]
    Parameter { op: &'static str, msg: String },

    /// Input values are unusable (NaN coordinates, non-finite data, ...).
    #[error("{op}: invalid input: {msg}")]
    Input { op: &'static str, msg: String },

    /// API misuse, e.g. calling `backward` on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),
}

impl TensorError {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn parameter(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Parameter {
            op,
            msg: msg.into(),
        }
    }

    pub fn input(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Input {
            op,
            msg: msg.into(),
        }
    }
}
