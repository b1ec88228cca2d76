use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(GradError::Shape(msg.into()))
}
