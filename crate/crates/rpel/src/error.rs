//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, estimation, and IO.
#[derive(Debug, Error)]
pub enum RpelError {
    /// Invalid dimensions, non-finite values, or violated type invariants.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Numeric failure during evaluation (overflow, singular matrix, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The solver or a tuning sweep failed to produce any usable fit.
    #[error("estimation failed: {0}")]
    Estimation(String),

    /// Every tuning grid point failed to converge. Carries the partial
    /// per-point results so callers can still inspect what was tried.
    #[error("tuning failed: {message}")]
    TuningFailed {
        message: String,
        table: Vec<crate::tuning::TuningRow>,
    },

    /// File or format problems while reading/writing datasets and reports.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for RpelError {
    fn from(e: std::io::Error) -> Self {
        RpelError::Io(e.to_string())
    }
}

impl From<csv::Error> for RpelError {
    fn from(e: csv::Error) -> Self {
        RpelError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for RpelError {
    fn from(e: serde_json::Error) -> Self {
        RpelError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RpelError>;
