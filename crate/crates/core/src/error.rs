use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-side precondition was violated.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input that is well-formed but cannot be processed, e.g. an all-zero weight vector.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A loss that is infinite because the target has zero probability.
    #[error("infinite loss: {0}")]
    InfiniteLoss(String),

    /// Training produced a non-finite value.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("parse error in {path} at byte offset {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}: line {line}: {detail}")]
    Format {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from misuse by the caller rather than from the data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }
}
