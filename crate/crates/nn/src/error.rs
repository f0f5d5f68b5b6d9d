use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
