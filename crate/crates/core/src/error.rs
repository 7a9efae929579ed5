use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Tape misuse or an operation called in a state that cannot support it.
    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    /// The finite-difference oracle could not produce a usable estimate.
    #[error("gradient oracle error: {0}")]
    Oracle(String),

    /// Non-finite values reached the optimizer or a numeric check failed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
