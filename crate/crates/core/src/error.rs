use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the zero threshold")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("forward cache does not match the encoder: {0}")]
    CacheMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    #[error("digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
