use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value encountered ({0})")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("numerical blow-up at step {step} (replica {replica}): {reason}")]
    BlowUp {
        step: usize,
        replica: u64,
        reason: String,
    },

    #[error("value {value} left the admissible range ±{limit}")]
    RangeExceeded { value: f64, limit: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("incompatible runs: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
