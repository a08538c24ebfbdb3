use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported bit depth: maxval {0} (only 8-bit PGM is supported)")]
    UnsupportedDepth(u32),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("architecture mismatch: expected {expected}, found {found}")]
    Architecture { expected: String, found: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("invalid phantom: {0}")]
    Phantom(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
