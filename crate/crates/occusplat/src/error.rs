use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate covariance: condition number {cond:.3e} exceeds {limit:.3e}")]
    DegenerateCovariance { cond: f64, limit: f64 },

    #[error("image dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("format error in {path}: {detail} (byte offset {offset})")]
    Format {
        path: PathBuf,
        detail: String,
        offset: u64,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("non-finite value encountered during {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
            offset,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
