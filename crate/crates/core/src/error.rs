use std::path::PathBuf;

use thiserror::Error;

use crate::engine::EngineError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Format(String),

    #[error("{0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("inputs are misaligned; offending ids: {}", .ids.join(","))]
    Alignment { ids: Vec<String> },

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Engine(EngineError::Shape { .. }) => "dimension",
            Error::Engine(EngineError::Index { .. }) => "index",
            Error::Engine(EngineError::Contract(_)) => "contract",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Alignment { .. } => "alignment",
            Error::NonFiniteGradient { .. } => "non-finite-gradient",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
