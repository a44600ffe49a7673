use std::path::PathBuf;

use ndcore::NdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArcError {
    #[error(transparent)]
    Tensor(#[from] NdError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingestion failed for {} path(s): {}", .0.len(), display_paths(.0))]
    Ingest(Vec<(PathBuf, String)>),
    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },
    #[error("non-finite value in {0}")]
    Numeric(&'static str),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

fn display_paths(items: &[(PathBuf, String)]) -> String {
    items
        .iter()
        .map(|(p, why)| format!("{} ({why})", p.display()))
        .collect::<Vec<_>>()
        .join("; ")
}

impl ArcError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| ArcError::Io { path, source }
    }

    /// True for errors caused by bad input or configuration rather than by a
    /// failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, ArcError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, ArcError>;
