use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Operator arguments that cannot be combined: mismatched dims,
    /// non-positive output extents, bad pooling sizes.
    #[error("{op}: {detail}")]
    Config { op: &'static str, detail: String },

    /// API misuse, e.g. backward on a non-scalar or a consumed graph.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn config_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Config {
        op,
        detail: detail.into(),
    }
}
