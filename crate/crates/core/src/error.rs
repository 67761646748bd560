use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::grad::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {id} outside a vocabulary of {size}")]
    TokenId { id: usize, size: usize },
    #[error("invalid dictionary: {0}")]
    Dictionary(String),
    #[error("sequence of length {length} exceeds the maximum {max}")]
    TooLong { length: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    IoBare(#[from] std::io::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}
