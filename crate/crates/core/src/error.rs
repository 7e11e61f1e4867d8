use thiserror::Error;

use crate::space::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid subnet: {0}")]
    InvalidSpec(Violation),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: needed {needed}, got {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("non-finite loss at batch {batch} for subnet {spec}")]
    NonFinite { batch: usize, spec: String },

    #[error("missing latency entry for {0}")]
    MissingLatency(String),

    #[error("corrupt file at byte offset {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("encoding mismatch: {0}")]
    Encoding(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
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
