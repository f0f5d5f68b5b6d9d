use std::path::PathBuf;

use stylestego_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StegoError {
    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("payload of {bits} bits exceeds capacity of {capacity} bits ({grid})")]
    Capacity { bits: usize, capacity: usize, grid: String },

    #[error("invalid message: {0}")]
    Message(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl StegoError {
    /// Short stable tag used in machine-readable CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            StegoError::Nn(_) | StegoError::Shape(_) => "shape",
            StegoError::Capacity { .. } => "capacity",
            StegoError::Message(_) => "message",
            StegoError::Config(_) => "config",
            StegoError::Dataset(_) => "dataset",
            StegoError::Integrity(_) => "integrity",
            StegoError::Incompatible(_) => "incompatible",
            StegoError::Image { .. } => "image",
            StegoError::Training(_) => "training",
            StegoError::Evaluation(_) => "evaluation",
            StegoError::Io(_) => "io",
            StegoError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, StegoError>;
