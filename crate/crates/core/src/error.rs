use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("unknown utterance {document_id}:{sentence_index}")]
    UnknownUtterance { document_id: String, sentence_index: usize },

    #[error("unknown document {0}")]
    UnknownDocument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("semantic provider: {0}")]
    Provider(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at stage {stage} step {step}: {detail}")]
    Divergence { stage: u8, step: usize, detail: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
