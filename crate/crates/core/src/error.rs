use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error in {path}: {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("alignment error: subject ids missing from labels: {}", missing.join(", "))]
    Alignment { missing: Vec<String> },

    #[error("rank deficiency: eigenvalue of component {component} is {eigenvalue:e}")]
    RankDeficient { component: usize, eigenvalue: f64 },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage} failed in fold {fold}: {source}")]
    Stage {
        fold: usize,
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than runtime or numeric failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_)
            | Error::Parse { .. }
            | Error::Alignment { .. }
            | Error::Stratification(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Validation(format!($($arg)*))
    };
}

pub(crate) use invalid;
