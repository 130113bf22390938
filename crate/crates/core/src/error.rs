use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor {id} does not belong to this tape")]
    ForeignTensor { id: usize },

    #[error("attention row {row} has no permitted keys")]
    FullyMaskedRow { row: usize },

    #[error("sinusoidal embedding dimension must be even and >= 2, got {0}")]
    OddEmbeddingDim(usize),

    #[error("timestep {0} outside [0, 1]")]
    TimestepOutOfRange(f64),

    #[error("block selection K={k} exceeds expert depth {depth}")]
    DepthOutOfRange { k: usize, depth: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: usize, diagnostics: String },

    #[error("shuffle_future needs at least two trajectories, got {0}")]
    BatchTooSmall(usize),

    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
