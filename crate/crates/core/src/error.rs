use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate anchor: {0}")]
    DegenerateAnchor(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("degenerate segment: {0}")]
    DegenerateSegment(String),

    #[error("empty track: {0}")]
    EmptyTrack(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("degenerate softmax: every position along the axis is masked")]
    DegenerateSoftmax,

    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric health: {0}")]
    NumericHealth(String),

    #[error("frame error: {0}")]
    Frame(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
