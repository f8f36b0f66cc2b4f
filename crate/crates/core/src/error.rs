use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {id} is not a valid {context} symbol (inventory size {limit})")]
    InvalidToken {
        id: usize,
        limit: usize,
        context: &'static str,
    },

    #[error("unknown token {token:?}")]
    UnknownToken { token: String },

    #[error("length mismatch: expected {expected}, got {actual} ({context})")]
    LengthMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("no alignment of length {canvas} collapses to a target of length {target}")]
    NoAlignment { target: usize, canvas: usize },

    #[error("enumeration would produce {count} alignments, above the bound of {bound}")]
    EnumerationBound { count: u128, bound: u128 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus violates the canvas length assumption: {0}")]
    Corpus(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
