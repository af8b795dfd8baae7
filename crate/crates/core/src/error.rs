use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// A minibatch label falls in the client's empty-class set, which means
    /// the prior and the partition it was computed from disagree.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("ingestion error in {field}: {reason}")]
    Ingestion { field: String, reason: String },

    #[error("training diverged: client {client}, round {round}, epoch {epoch}, batch {batch} (loss {loss})")]
    Divergence {
        client: usize,
        round: usize,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

/// Coarse error families, used by the command line front end to choose an
/// exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Config,
    Ingestion,
    Training,
    Io,
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::Config(_) | Error::Partition(_) => ErrorFamily::Config,
            Error::Ingestion { .. } => ErrorFamily::Ingestion,
            Error::Shape(_)
            | Error::Usage(_)
            | Error::Consistency(_)
            | Error::Divergence { .. }
            | Error::Evaluation(_) => ErrorFamily::Training,
            Error::Io { .. } | Error::Serialization(_) => ErrorFamily::Io,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn ingest(field: &str, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

impl ErrorFamily {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorFamily::Config => 2,
            ErrorFamily::Ingestion => 3,
            ErrorFamily::Training => 4,
            ErrorFamily::Io => 5,
        }
    }
}
