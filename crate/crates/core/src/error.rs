use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FuseError>;

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty coverage: MSI band {band} ({low} nm, {high} nm) covers no HSI band")]
    EmptyCoverage { band: usize, low: f64, high: f64 },

    #[error("degenerate SRF: MSI band {0} has an all-zero weight vector")]
    DegenerateSrf(usize),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl FuseError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FuseError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        FuseError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            FuseError::Divergence(_) => 3,
            _ => 2,
        }
    }
}
