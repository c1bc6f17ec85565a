use std::path::PathBuf;

use thiserror::Error;

use crate::percept::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file could not be decoded; `line`/`column` are 1-based, zero when unknown.
    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate camera: pitch {0} rad leaves the up vector undefined")]
    DegenerateCamera(f64),

    #[error("non-finite input at sample {index}")]
    NonFinite { index: usize },

    #[error("viewpoint {index}: {source}")]
    AtViewpoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("unknown building id {0}")]
    UnknownBuilding(u32),

    #[error("sampling region is empty: {0}")]
    EmptyRegion(String),

    #[error("expression: {0}")]
    Expr(#[from] ParseError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
