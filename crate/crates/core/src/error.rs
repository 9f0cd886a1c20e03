use std::path::PathBuf;

use pyrad_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// A model stage failed; carries the stage name for diagnostics.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: TensorError,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    /// Evaluation or training protocol violated (single-class test set,
    /// anomalous sample in training data).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("parameter `{0}` is frozen")]
    Frozen(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for NaN/Inf failures anywhere in the stack.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::Tensor(TensorError::NonFinite(_))
                | Error::Stage {
                    source: TensorError::NonFinite(_),
                    ..
                }
        )
    }
}
