use thiserror::Error;

/// Errors raised by the training toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tensor `{name}` has shape {shape:?} ({expected} values) but {actual} values were supplied")]
    ValueCount {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite loss value {value}")]
    NonFiniteLoss { value: f64 },

    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("subset size {k} exceeds population {n}")]
    SubsetTooLarge { k: usize, n: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {value}")]
    Diverged {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
