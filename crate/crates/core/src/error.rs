use std::path::PathBuf;

use ammsm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user-facing configuration (out-of-range ratio, α, spec values).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: format error{}: {msg}", path.display(), offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format {
        path: PathBuf,
        offset: Option<u64>,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("fold {fold} (subject {subject}) failed: {source}")]
    Fold {
        fold: usize,
        subject: usize,
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: Option<u64>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by the run configuration rather than by the run.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Fold { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

/// Tensor format errors keep their path and offset; everything else is wrapped.
pub(crate) fn lift(e: TensorError) -> Error {
    match e {
        TensorError::Format { path, offset, msg } => Error::Format {
            path,
            offset: Some(offset),
            msg,
        },
        TensorError::Io { path, source } => Error::Io { path, source },
        other => Error::Tensor(other),
    }
}
