//! Vocabulary, synthetic corpus generation, corpus files and checkpoints.

pub mod checkpoint;
pub mod corpus;
pub mod synth;
pub mod vocab;

use std::path::Path;

use thiserror::Error;

pub use vocab::{Vocabulary, CLS, EOS, MASK, PAD, SPECIAL_TOKENS, UNK};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus header: {0}")]
    Header(String),
    #[error("corpus record {record}: {message}")]
    Schema { record: usize, message: String },
    #[error("checkpoint field {field}: {message}")]
    Checkpoint { field: String, message: String },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}
