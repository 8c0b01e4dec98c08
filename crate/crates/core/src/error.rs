use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("masked softmax row {row} has no unmasked entry")]
    FullyMaskedRow { row: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("instance {0} has an empty mask")]
    EmptyInstance(usize),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("target index {target} out of range for {count} candidates")]
    TargetOutOfRange { target: usize, count: usize },

    #[error("every token is padding")]
    AllPadding,

    #[error("radius schedule {0:?} is not non-increasing")]
    IncreasingSchedule(Vec<f64>),

    #[error("infeasible scene: {0}")]
    Infeasible(String),

    #[error("no unambiguous referral: {0}")]
    Ambiguous(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
