use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable does not belong to this graph")]
    ForeignVariable,

    #[error("parameter {0} has no gradient")]
    MissingGradient(u64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("task registry: {0}")]
    Registry(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by NaN/Inf or an undefined numerical quantity.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
