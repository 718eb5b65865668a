use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value (dilation, spec field, config key...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Several configuration problems found at once, one message per key.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    ConfigKeys(Vec<String>),

    /// A forward op produced NaN or infinity from finite inputs.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Misuse of the gradient tape (non-scalar loss, detached loss...).
    #[error("autograd error: {0}")]
    Autograd(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    /// A metric has no defined value for the given input.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    /// File exists but its content does not parse.
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause: source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
