use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A window (kernel or pooling) does not fit inside the map.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Mismatched channel counts or buffer lengths.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration: zero strides, non-integral pooling tiling, bad sparsity, ...
    #[error("configuration error: {0}")]
    Config(String),

    /// A compressed map violates its own invariants.
    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic {found:?}, expected \"FMAP\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported FMAP version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated FMAP header")]
    TruncatedHeader,

    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("work item (block {block}, thread {thread}) failed: {source}")]
    WorkItem {
        block: usize,
        thread: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("layer {index} failed: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_path(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by user input rather than internal faults.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Io(e) => matches!(
                e.kind(),
                std::io::ErrorKind::NotFound
                    | std::io::ErrorKind::PermissionDenied
                    | std::io::ErrorKind::IsADirectory
            ),
            Error::File { source, .. }
            | Error::WorkItem { source, .. }
            | Error::Layer { source, .. } => source.is_usage(),
            _ => true,
        }
    }
}
