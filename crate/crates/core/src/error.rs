use std::path::PathBuf;

use thiserror::Error;

use crate::layers::DomainTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: input is empty")]
    Empty { op: &'static str },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("degenerate batch of {rows} row(s); training-mode normalization needs at least 2")]
    DegenerateBatch { rows: usize },

    #[error("running statistics for the {0} domain have never been updated")]
    StatsUninitialized(DomainTag),

    #[error("{path}: {location}: {message}")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("dataset block `{block}`: expected {expected}, found {found}")]
    Validation {
        block: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint section `{section}`: {message}")]
    Checkpoint { section: String, message: String },

    #[error("numeric abort at iteration {iteration}: {term} is not finite")]
    NumericAbort { iteration: usize, term: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers themselves rather than the inputs.
    pub fn is_numeric_abort(&self) -> bool {
        matches!(self, Error::NumericAbort { .. })
    }
}
