//! Learned discrete document identifiers for generative retrieval.
//!
//! Documents are compressed into short sequences of discrete tokens
//! (docids) by a progressively trained discrete auto-encoder; retrieval
//! generates docids for a query under prefix-tree constraints.

pub mod balanced;
pub mod checkpoint;
pub mod codebook;
pub mod corpus;
pub mod eval;
pub mod index;
pub mod model;
pub mod numeric;
pub mod training;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
