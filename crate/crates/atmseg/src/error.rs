//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AtmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown class id {0}")]
    InvalidClass(u32),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("load error in {path}: {reason}")]
    Load { path: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AtmError>;
