use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty after {stage}")]
    EmptyDataset { stage: &'static str },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("batch of {got} rows is too small, need at least {need}")]
    InsufficientBatch { got: usize, need: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("t-test is undefined: {0}")]
    UndefinedTest(String),

    #[error("no user has a non-empty evaluation set")]
    EmptyEvaluation,

    #[error("cannot return top-{n}: only {available} candidate items")]
    CutoffTooLarge { n: usize, available: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CutoffTooLarge { .. } => 1,
            Error::Numeric(_)
            | Error::Degenerate(_)
            | Error::Invariant(_)
            | Error::UndefinedTest(_) => 3,
            _ => 2,
        }
    }
}
