use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(char),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("sequence of length {len} exceeds max_positions {max}")]
    Overlength { len: usize, max: usize },

    #[error("duplicate chunk index {0} in expansion set")]
    DuplicateIndex(usize),

    #[error("chunk index {index} out of range for {len} chunks")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("all chunks are masked")]
    AllMasked,

    #[error("curriculum schedule: {0}")]
    Schedule(String),

    #[error("decoder parameters drifted during a frozen-decoder stage")]
    DecoderDrift,

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("subset enumeration of C({n}, {r}) = {count} exceeds the limit of {limit}")]
    CombinatorialBlowup { n: usize, r: usize, count: u128, limit: u128 },

    #[error("timer too coarse: {0}")]
    TimerResolution(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
