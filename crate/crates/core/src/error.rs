//! Crate error type.
//!
//! Two broad classes, matching the CLI exit codes: configuration problems
//! (bad config file, invalid dimensions, malformed data) and run failures
//! (saturation abort, non-finite values).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, data file, or parameter combination.
    #[error("config error: {0}")]
    Config(String),

    /// A run started but could not finish.
    #[error("run error: {0}")]
    Run(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn run(msg: impl Into<String>) -> Self {
        Error::Run(msg.into())
    }
}
