use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure in {op}: {context}")]
    NumericFailure { op: &'static str, context: String },

    #[error("config error in {field}: {message}")]
    Config { field: String, message: String },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Remote(#[from] crate::enhancer::RemoteError),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn numeric(op: &'static str, context: impl Into<String>) -> Self {
        Error::NumericFailure {
            op,
            context: context.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes a numeric-failure context; other variants pass through.
    pub fn with_context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::NumericFailure { op, context } => Error::NumericFailure {
                op,
                context: format!("{ctx}: {context}"),
            },
            Error::InvalidInput(msg) => Error::InvalidInput(format!("{ctx}: {msg}")),
            other => other,
        }
    }

    /// Process exit code: 2 validation, 3 runtime/numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config { .. } | Error::Parse { .. } => 2,
            Error::NumericFailure { .. } | Error::Remote(_) => 3,
            Error::Checkpoint(_) | Error::Io { .. } => 4,
            Error::Iteration { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Fails with a numeric error when any entry is non-finite.
pub(crate) fn ensure_finite(op: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(op, format!("non-finite value at index {i}"))),
        None => Ok(()),
    }
}
