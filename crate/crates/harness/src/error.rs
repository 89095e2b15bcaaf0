use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{source_name}: malformed header: {reason}")]
    BadHeader { source_name: String, reason: String },

    #[error("{source_name}: truncated payload: expected {expected} bytes, found {actual}")]
    Truncated {
        source_name: String,
        expected: usize,
        actual: usize,
    },

    #[error("{source_name}: {extra} unexpected bytes after the payload")]
    TrailingBytes { source_name: String, extra: usize },

    #[error("{source_name}: label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        source_name: String,
        row: usize,
        label: i64,
        classes: usize,
    },

    #[error("{source_name}: feature value {value} at row {row} is outside [0, 1]")]
    FeatureOutOfRange {
        source_name: String,
        row: usize,
        value: f32,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("method `{method}`: {source}")]
    Method {
        method: String,
        #[source]
        source: advprune_core::Error,
    },

    #[error(transparent)]
    Core(#[from] advprune_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
