//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// Bad sizes, ranges or configuration values.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A loss or statistic became non-finite.
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Invalid(msg.into()))
}
