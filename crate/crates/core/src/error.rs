use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: width and height must be positive and finite")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("invalid detection: {0}")]
    InvalidDetection(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("tensor file: {0}")]
    Format(String),

    #[error("{path}: {message}")]
    Json { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. }
        )
    }
}
