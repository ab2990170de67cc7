use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalarRoot(Vec<usize>),

    #[error("backward root does not belong to this tape")]
    DetachedRoot,

    #[error("{op}: bad output size {requested:?} for input {input:?}")]
    BadOutputSize {
        op: &'static str,
        requested: (usize, usize),
        input: (usize, usize),
    },

    #[error("width {width} is not divisible by {heads} heads")]
    HeadsDontDivide { width: usize, heads: usize },

    #[error("support mask of shot {shot} has no foreground pixels at feature resolution")]
    EmptySupportMask { shot: usize },

    #[error("image size {0}x{1} is below the 32x32 minimum")]
    SizeTooSmall(usize, usize),

    #[error("image size {0}x{1} is not divisible by 8")]
    BadImageSize(usize, usize),

    #[error("bad magic {0:?}, expected \"TRFS\"")]
    BadMagic([u8; 4]),

    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("dtype mismatch: file holds {found}, requested {requested}")]
    DtypeMismatch {
        found: &'static str,
        requested: &'static str,
    },

    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
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
}
