use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Why a flat target sequence could not be turned back into a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MalformedKind {
    Unbalanced,
    NoRootIntent,
    PointerOutOfRange,
    PointerOrder,
    PointerCoverage,
}

impl fmt::Display for MalformedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MalformedKind::Unbalanced => "unbalanced",
            MalformedKind::NoRootIntent => "no-root-intent",
            MalformedKind::PointerOutOfRange => "pointer-out-of-range",
            MalformedKind::PointerOrder => "pointer-order",
            MalformedKind::PointerCoverage => "pointer-coverage",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("malformed sequence ({0})")]
    MalformedSequence(MalformedKind),
    #[error("invalid BIO annotation: {0}")]
    InvalidBio(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("cannot parse target token `{0}`")]
    BadToken(String),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("grammar error: {0}")]
    Grammar(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {category}")]
    Format { line: usize, category: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("pointer index {index} out of range for source length {len}")]
    Index { index: usize, len: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IrError> = std::result::Result<T, E>;
