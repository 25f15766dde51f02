use std::path::PathBuf;

/// Errors produced anywhere in the grading pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors disagree along a named axis.
    #[error("{op}: dimension mismatch on axis `{axis}` (expected {expected}, got {actual})")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Window/stride/padding combination that yields no output, or a plan
    /// whose resolutions do not chain.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// API misuse, e.g. backward from a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in `{name}`: {detail}")]
    Numeric { name: String, detail: String },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("cannot resolve `{}`: {source}", path.display())]
    Resolve {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::InvalidGeometry(msg.into())
    }
}
