use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}{}", location.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Dimension {
        expected: usize,
        actual: usize,
        location: Option<usize>,
    },

    #[error("empty stream: {0}")]
    EmptyStream(String),

    #[error("duplicate entry: {0}")]
    Duplicate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("singular normal equations: {0}")]
    Singular(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) | Error::Singular(_) => 3,
            _ => 2,
        }
    }
}
