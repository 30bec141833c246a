use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("failed to encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },

    #[error("unsupported pixel format in {path}: {format} (expected 8-bit gray or RGB)")]
    UnsupportedFormat { path: PathBuf, format: String },

    #[error("image {width}x{height} is not divisible by ratio {ratio}; crop it first")]
    NotDivisible { width: usize, height: usize, ratio: usize },

    #[error("pixel ({row}, {col}) is not covered by any patch")]
    UncoveredPixel { row: usize, col: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value while updating patch {patch}, element {element}")]
    NonFinite { patch: usize, element: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("back-projection diverged (objective {objective}); try a smaller step")]
    Diverged { objective: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
