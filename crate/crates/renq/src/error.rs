//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenqError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("replay error: {0}")]
    Replay(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("bvc error: {0}")]
    Bvc(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl RenqError {
    /// Process exit code for the CLI: 1 usage, 2 config, 3 check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RenqError::Usage(_) => 1,
            RenqError::Config(_) | RenqError::Checkpoint(_) => 2,
            _ => 2,
        }
    }
}
