use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not fit the operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A network, simulator or run configuration is not valid.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called outside its contract (bad index, non-scalar loss, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("decode error: {0}")]
    Decode(String),

    /// A binary or text artifact is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("{path}: {source}")]
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

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input, configuration or a missing file
    /// rather than by a failure while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::Config(_) | Error::Usage(_) | Error::Decode(_) | Error::Format(_)
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
