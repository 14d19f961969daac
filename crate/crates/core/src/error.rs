use std::fmt;

use crate::metrics::MetricsRecord;

pub type Result<T> = std::result::Result<T, Error>;

/// Where a non-finite value was first observed during training.
#[derive(Debug, Clone, PartialEq)]
pub enum DivergenceSite {
    /// Local SGD on a client.
    Client { client: usize, step: usize },
    /// Server-side aggregation, scheduling or global update.
    Server,
}

impl fmt::Display for DivergenceSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DivergenceSite::Client { client, step } => write!(f, "client {client}, local step {step}"),
            DivergenceSite::Server => f.write_str("server"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config line {line}: key `{key}`: {message}")]
    ConfigParse { line: usize, key: String, message: String },

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("training diverged in round {round} at {site}: {detail}")]
    Diverged {
        round: usize,
        site: DivergenceSite,
        detail: String,
        /// The last fully finite metrics row, if any round completed.
        last_finite: Option<Box<MetricsRecord>>,
    },

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite(what.into())
    }
}
