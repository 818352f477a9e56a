use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: &'static str, step: usize },
    #[error("block {index}: {source}")]
    Block {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("unknown variant {name:?}; valid: {valid}")]
    UnknownVariant { name: String, valid: String },
    #[error("external tool: {0}")]
    External(String),
    #[error(transparent)]
    Tensor(#[from] chromalink_autograd::Error),
}

impl Error {
    /// Short stable category used for machine-readable CLI failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::Tensor(_) => "shape",
            Error::Input(_) => "input",
            Error::Config(_) | Error::UnknownVariant { .. } => "config",
            Error::Io { .. } | Error::Image { .. } => "io",
            Error::Format { .. } => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non-finite",
            Error::Block { source, .. } => source.category(),
            Error::External(_) => "external",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_shape(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}
