use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// The variants are coarse on purpose: the command-line front end maps each
/// one onto a distinct exit code.
#[derive(Debug, Error)]
pub enum BratError {
    /// A parameter failed validation before any work started.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    /// Malformed, missing or degenerate input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("dimension mismatch: expected {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A linear solve, factorization or calibration could not be completed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BratError {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        BratError::InvalidParam {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, BratError>;
