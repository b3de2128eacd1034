//! One error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operands do not fit together. `op` names the graph operation or
    /// API entry point, `detail` spells out the offending extents.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A value-level precondition failed (bad hyperparameter, bad label
    /// value, inconsistent arguments).
    #[error("{0}")]
    Invalid(String),

    /// Malformed tensor blob or checkpoint container.
    #[error("blob: {0}")]
    Blob(String),

    /// Config file could not be parsed or failed validation.
    #[error("config: {0}")]
    Config(String),

    /// A NaN or infinity showed up where finite math was expected.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
