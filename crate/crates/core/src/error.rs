use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("split error: fine class `{class}` has {available} training instances, {required} required")]
    Split {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Training { epoch: usize, batch: usize },

    #[error("seed {seed}: {source}")]
    Replicate {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the command line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Split { .. } => "split",
            Error::Protocol(_) => "protocol",
            Error::Training { .. } => "training",
            Error::Replicate { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
