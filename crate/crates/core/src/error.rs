use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PrepoError>;

#[derive(Debug, Error)]
pub enum PrepoError {
    #[error("capacity: {0}")]
    Capacity(String),

    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    OutOfVocabulary { token: u32, vocab: usize },

    #[error("domain: {0}")]
    Domain(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("correlation undefined: {0}")]
    Undefined(String),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("missing input: {}", .0.display())]
    Missing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
