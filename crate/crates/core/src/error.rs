use thiserror::Error;

/// Errors raised by tensor kernels, the tape, model assembly and training.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: expected a {expected}-D tensor, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("value id {0} is not on the tape")]
    UnknownValue(usize),

    #[error("batch norm '{0}' evaluated in eval mode before running statistics were initialised")]
    UninitializedStats(String),

    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),

    #[error("unknown architecture '{0}'")]
    UnknownArchitecture(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Event(#[from] EventError),
}

/// Distinct failure modes of event-file parsing.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("bad magic")]
    BadMagic,

    #[error("unsupported event file version {0}")]
    Version(u32),

    #[error("truncated event file: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },

    #[error("event {index}: coordinate ({x}, {y}) outside {width}x{height} sensor")]
    CoordinateOutOfRange {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("event {index}: polarity {p} is not 0 or 1")]
    PolarityOutOfRange { index: usize, p: u8 },

    #[error("event {index}: timestamp {t} precedes {prev}")]
    DecreasingTimestamp { index: usize, t: u32, prev: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
