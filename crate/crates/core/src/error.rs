use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UraError>;

#[derive(Debug, Error)]
pub enum UraError {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// More distinct codewords requested than there are weight-S supports.
    #[error("infeasible codebook: {requested} codewords requested but only {available} distinct supports exist")]
    InfeasibleCodebook { requested: u128, available: u128 },

    #[error("construction error: {0}")]
    Construction(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Gain of an all-zero symbol row cannot be estimated.
    #[error("undefined gain: {0}")]
    UndefinedGain(String),

    #[error("numerically singular system: {0}")]
    Singular(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("trial {trial} failed: {message}")]
    Trial { trial: usize, message: String },
}

impl UraError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UraError::Io {
            path: path.into(),
            source,
        }
    }
}
