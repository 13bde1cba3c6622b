use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps these onto its exit-code contract: verification failures
/// exit 1, configuration/argument problems exit 2, I/O problems exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 1 assertion/verification failure, 2 config
    /// or argument error, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 1,
            Error::Io(_) => 3,
            _ => 2,
        }
    }
}
