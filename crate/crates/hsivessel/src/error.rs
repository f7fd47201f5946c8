//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("wavelength axis is not strictly increasing at index {index}: {prev} >= {next}")]
    NonMonotonicWavelengths { index: usize, prev: f64, next: f64 },

    #[error("band count mismatch: data has {data_bands} bands, wavelength axis has {axis_bands}")]
    BandCountMismatch { data_bands: usize, axis_bands: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("wavelength window [{lo}, {hi}] nm selects no bands")]
    EmptyWindow { lo: f64, hi: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("cube file size mismatch for {path}: header implies {expected} bytes, file has {actual}")]
    CubeSizeMismatch { path: PathBuf, expected: u64, actual: u64 },

    #[error("source sample '{0}' has no mask")]
    UnmaskedSource(String),

    #[error("unknown approach id '{0}'")]
    UnknownApproach(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
