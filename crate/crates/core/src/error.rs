use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at {location}")]
    Numeric { location: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key(s): {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("incompatible environment: expected `{expected}`, found `{found}`")]
    Compatibility { expected: String, found: String },

    #[error("expert failed to produce {wanted} successful episodes in {attempts} attempts")]
    Generation { wanted: usize, attempts: usize },

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
