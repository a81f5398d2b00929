use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid codebook spec: {0}")]
    Spec(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A vector that must be ℓ2-normalized has (near) zero norm.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("codebooks are not orthonormal; lookup-table scoring is invalid, use the aqd scorer")]
    NotOrthonormal,

    #[error("index was built by a different model (fingerprint mismatch)")]
    FingerprintMismatch,

    #[error("query has no relevant database items")]
    UndefinedQuery,

    #[error("no query has a relevant database item")]
    NoValidQueries,

    #[error("unknown scorer `{0}`")]
    UnknownScorer(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
