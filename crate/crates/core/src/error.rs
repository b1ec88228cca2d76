use ndgrad::GradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error at step {step}: {msg}")]
    Numeric { step: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Grad(GradError::Shape(_)) => "shape",
            Error::Grad(GradError::Usage(_)) => "usage",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Format(_) | Error::Json(_) => "format",
            Error::Numeric { .. } => "numeric",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
