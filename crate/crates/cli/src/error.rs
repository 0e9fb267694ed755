use ckm_core::CkmError;
use ckm_edge::EdgeError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CkmError),

    #[error(transparent)]
    Edge(#[from] EdgeError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NETWORK: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

fn core_code(e: &CkmError) -> i32 {
    match e {
        CkmError::InvalidArgument(_) => EXIT_USAGE,
        CkmError::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => core_code(e),
            CliError::Edge(e) => match e {
                EdgeError::Core(c) => core_code(c),
                EdgeError::InvalidArgument(_) => EXIT_USAGE,
                e if e.is_network() => EXIT_NETWORK,
                _ => EXIT_DATA,
            },
            CliError::Io(_) | CliError::Json(_) => EXIT_DATA,
        }
    }
}
