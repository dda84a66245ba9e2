use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("query outside map bounds: {0}")]
    OutOfBounds(String),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("too few confidently observed cells for registration: {got} < {need}")]
    TooFewObserved { got: usize, need: usize },

    #[error("sample rejected: registration fitness {fitness:.4} below threshold {threshold:.4}")]
    SampleRejected { fitness: f64, threshold: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("start pose is infeasible")]
    StartInfeasible,

    #[error("unknown layer '{name}'; available: {available}")]
    UnknownLayer { name: String, available: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
