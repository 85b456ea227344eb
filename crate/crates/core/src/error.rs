use thiserror::Error;

/// Unified error type for the whole engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A primitive was handed tensors whose extents do not satisfy its shape rule.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A primitive attribute is out of its valid range (stride, dilation, groups, ...).
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttr { op: &'static str, detail: String },

    /// A primitive produced NaN or Inf. `index` is the tape position of the record.
    #[error("{op}: non-finite value produced (tape record {index})")]
    NonFinite { op: &'static str, index: usize },

    /// An optimizer step was scheduled for a parameter whose gradient is absent.
    #[error("gradient missing for parameter '{name}'")]
    MissingGrad { name: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("genotype: {0}")]
    Genotype(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// The search loop hit a non-finite loss and stopped with the last good state.
    #[error("search aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
