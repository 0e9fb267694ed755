use std::io;

use ckm_core::CkmError;
use thiserror::Error;

pub type Result<T, E = EdgeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error(transparent)]
    Core(#[from] CkmError),

    #[error("io: {0}")]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed frame or unexpected reply.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// The peer answered with an ERROR frame.
    #[error("server error: {0}")]
    Remote(String),

    /// Could not reach the server.
    #[error("connection to {addr} failed: {source}")]
    Connect { addr: String, source: io::Error },

    /// Payload does not hash to what its manifest promised. Retrying may help.
    #[error("integrity check failed for {version}: expected sha256 {expected}, got {actual}")]
    Integrity {
        version: String,
        expected: String,
        actual: String,
    },

    /// Inconsistent registry directory.
    #[error("registry: {0}")]
    Registry(String),

    #[error("version {0:?} is already published")]
    DuplicateVersion(String),

    #[error("unknown version {0:?}")]
    UnknownVersion(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl EdgeError {
    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        EdgeError::Protocol(msg.into())
    }

    /// Whether the failure came from the network rather than local data.
    pub fn is_network(&self) -> bool {
        matches!(
            self,
            EdgeError::Connect { .. }
                | EdgeError::Protocol(_)
                | EdgeError::Remote(_)
                | EdgeError::Integrity { .. }
        ) || matches!(self, EdgeError::Io(e) if matches!(
            e.kind(),
            io::ErrorKind::ConnectionReset
                | io::ErrorKind::ConnectionAborted
                | io::ErrorKind::BrokenPipe
                | io::ErrorKind::UnexpectedEof
                | io::ErrorKind::TimedOut
        ))
    }
}
