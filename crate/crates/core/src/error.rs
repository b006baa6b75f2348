use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bad feature dump {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
