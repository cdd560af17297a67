use thiserror::Error;

/// Errors raised by the toolkit's library surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid span [{start}, {end}]: {reason}")]
    InvalidSpan { start: f64, end: f64, reason: &'static str },

    #[error("gold span set is empty")]
    EmptyGold,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("frames are not temporally ordered at position {0}")]
    UnorderedFrames(usize),

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("record {id}: {reason}")]
    Record { id: String, reason: String },

    #[error("duplicate item id `{0}`")]
    DuplicateId(String),

    #[error("prediction for unknown item id `{0}`")]
    UnmatchedId(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("backend transport error: {0}")]
    Transport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
