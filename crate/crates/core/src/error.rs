use std::path::PathBuf;

use gsap_autograd::ManifestError;

pub type Result<T, E = GsapError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum GsapError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("no lexicon entity found in question {0:?}")]
    QuestionUngrounded(String),

    #[error("relation {0:?} is not in the relation vocabulary")]
    UnknownRelation(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimMismatch { what: &'static str, expected: usize, found: usize },

    #[error("cannot encode an empty graph")]
    EmptyGraph,

    #[error("sequence of {len} positions exceeds the maximum of {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("question text is empty")]
    EmptyQuestion,

    #[error("{path}: no valid instances ({rejected} rejected)")]
    NoValidInstances { path: PathBuf, rejected: usize },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("conflicting flags: {0}")]
    ConflictingFlags(String),

    #[error("non-finite loss at step {step} on instance {instance}")]
    NonFiniteLoss { step: usize, instance: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GsapError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
