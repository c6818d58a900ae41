use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure reading a binary feature file. Each variant has a stable code.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureFileError {
    #[error("bad magic {found:?}, expected \"FGC1\"")]
    BadMagic { found: [u8; 4] },
    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dimension overflow: {frames} x {dim}")]
    DimensionOverflow { frames: u32, dim: u32 },
    #[error("feature file has zero frames")]
    Empty,
    #[error("feature file has zero dimensions")]
    ZeroDim,
}

impl FeatureFileError {
    pub fn code(&self) -> u32 {
        match self {
            FeatureFileError::BadMagic { .. } => 1,
            FeatureFileError::Truncated { .. } => 2,
            FeatureFileError::DimensionOverflow { .. } => 3,
            FeatureFileError::Empty => 4,
            FeatureFileError::ZeroDim => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    FeatureFile {
        path: PathBuf,
        #[source]
        source: FeatureFileError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("audio: {0}")]
    Audio(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
