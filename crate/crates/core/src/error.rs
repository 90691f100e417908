use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("vocabulary too small: {0}")]
    VocabularyTooSmall(String),
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("invalid word spans: {0}")]
    InvalidSpans(String),
    #[error("relation {0} is absent from the corpus")]
    MissingRelation(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("missing parse for batch sentence {0}")]
    MissingParse(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
