use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid noise distribution: token {0} has zero noise probability")]
    ZeroNoiseProbability(usize),

    #[error("vocabulary mismatch: expected hash {expected}, found {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("unknown document id {0}")]
    UnknownDocument(usize),

    #[error("empty index")]
    EmptyIndex,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("rating for unknown candidate {candidate} of item {item}")]
    UnknownCandidate { item: String, candidate: String },

    #[error("feature registry mismatch: {0}")]
    RegistryMismatch(String),

    #[error("feature provider `{feature}` failed: {message}")]
    Provider { feature: String, message: String },

    #[error("no feature providers registered")]
    NoProviders,

    #[error("missing reference set for item {0}")]
    MissingReferences(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
