use std::io;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = CkmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CkmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: Shape, got: Shape },

    /// A pixel value that no valid encoding can produce.
    #[error("invalid encoding: {0}")]
    Encoding(String),

    /// Malformed or corrupt file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl CkmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CkmError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        CkmError::Format(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        CkmError::Numerical(msg.into())
    }

    pub(crate) fn check_shape(expected: Shape, got: Shape) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(CkmError::ShapeMismatch { expected, got })
        }
    }
}
