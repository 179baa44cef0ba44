use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (limit {limit})")]
    Index {
        what: String,
        index: usize,
        limit: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown regime `{0}`")]
    UnknownRegime(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-parsable class name, used for CLI exit diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Index { .. } => "index",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::Parse { .. } => "parse",
            Error::UnknownRegime(_) => "unknown-regime",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
