use std::io;

use thiserror::Error;

/// Every failure the pipeline can report.
///
/// Variants are grouped by how a caller should react: configuration and
/// usage problems, malformed or insufficient data, and numeric breakdowns.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("insufficient atlas: {available} voxels available, {needed} required")]
    InsufficientAtlas { needed: usize, available: usize },

    #[error("length error: series of length {len} is shorter than the minimum {min}")]
    Length { len: usize, min: usize },

    #[error("clip structure error: {0}")]
    ClipStructure(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("cap error: requested {requested} {split} samples but only {available} balanced samples are available")]
    Cap {
        split: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("pool error: {0}")]
    Pool(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse category used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::State(_) => ErrorKind::Usage,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
