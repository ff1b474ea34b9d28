use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid sparsity config: {0}")]
    Sparsity(String),

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f32 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("infeasible resource constraint: {0}")]
    Infeasible(String),

    #[error("rejection sampling exhausted after {attempts} attempts")]
    RejectionExhausted { attempts: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Resolution(_) => "resolution",
            Error::Config(_) => "config",
            Error::Sparsity(_) => "sparsity",
            Error::Index { .. } => "index",
            Error::Autodiff(_) => "autodiff",
            Error::Divergence { .. } => "divergence",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Infeasible(_) => "infeasible",
            Error::RejectionExhausted { .. } => "rejection_exhausted",
            Error::BadMagic { .. } => "bad_magic",
            Error::Version { .. } => "version",
            Error::Truncated(_) => "truncated",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Format(_) => "format",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
