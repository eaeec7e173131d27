use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid grid sizes, counts or experiment settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A linear solve or factorization broke down.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    /// Malformed ensemble or report files.
    #[error("ingestion error ({path}): {detail}")]
    Ingestion { path: PathBuf, detail: String },

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("i/o error ({path}): {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Prefixes the context of a numerical failure, leaving other variants untouched.
    pub fn tagged(self, tag: impl std::fmt::Display) -> Self {
        match self {
            Error::Numerical { context, detail } => Error::Numerical {
                context: format!("{tag}: {context}"),
                detail,
            },
            other => other,
        }
    }
}
