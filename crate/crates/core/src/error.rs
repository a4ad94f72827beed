//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QartError {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN/Inf, division by zero, non-convergence and similar numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid argument outside shape issues (bad bit width, rank, range, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Calibration pipeline misuse (empty set, wrong stage order, ...).
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Synthetic data generation / degradation problems.
    #[error("data error: {0}")]
    Data(String),

    /// Run configuration problems (unknown field, invalid combination, bad path).
    #[error("config error: {0}")]
    Config(String),

    /// Module registry misuse (unknown handle, duplicate name).
    #[error("registry error: {0}")]
    Registry(String),

    /// Training-loop invariant violations (frozen weight changed, budget exhausted).
    #[error("training error: {0}")]
    Training(String),

    /// Cost accounting inconsistencies.
    #[error("accounting error: {0}")]
    Accounting(String),

    /// Malformed file content; `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QartError>;

impl QartError {
    pub fn dim(msg: impl Into<String>) -> Self {
        QartError::Dimension(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        QartError::Numeric(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        QartError::Parameter(msg.into())
    }
    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        QartError::Format {
            offset,
            msg: msg.into(),
        }
    }
}
