use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by any pcstyle module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: shape mismatch between {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: &'static str },

    #[error("{context}: empty input")]
    Empty { context: &'static str },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("cannot normalize a degenerate cloud: all points are identical")]
    DegenerateCloud,

    #[error("batch norm running statistics are not populated; train the network or warm the stats before inference")]
    StatsNotReady,

    #[error("batch norm in train mode needs at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },

    #[error("backward requires a scalar (1x1) output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("PLY parse error at line {line}: {message}")]
    PlyParse { line: usize, message: String },

    #[error("image decode error: {0}")]
    ImageDecode(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("transfer configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("unknown preset {name:?}; valid presets: pc-to-pc, image-to-object, image-to-scene")]
    UnknownPreset { name: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
