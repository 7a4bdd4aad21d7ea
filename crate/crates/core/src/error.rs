use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("{kind} file {path}: unsupported version {found}, expected {expected}")]
    VersionMismatch { kind: &'static str, path: PathBuf, found: String, expected: String },

    #[error("corrupt {kind} file {path}: {reason}")]
    Corrupt { kind: &'static str, path: PathBuf, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },

    #[error("segmentation head is not loaded")]
    NoHead,

    #[error("encoder is not loaded")]
    NoEncoder,

    #[error("edit label set is empty")]
    EmptyLabelSet,

    #[error("empty edit region")]
    EmptyEditRegion,

    #[error("cancelled at step {step}")]
    Cancelled { step: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("editing vector was learned on generator {vector_hash}, active generator is {generator_hash}")]
    IncompatibleVector { vector_hash: String, generator_hash: String },

    #[error("classifier training data contains a single class")]
    SingleClass,

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("feature vector has zero norm")]
    ZeroNormFeature,

    #[error("geometry out of frame: {0}")]
    OutOfFrame(String),

    #[error("image decode/encode failed: {0}")]
    Image(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::DimensionMismatch { expected: format!("{expected:?}"), got: format!("{got:?}") }
}
