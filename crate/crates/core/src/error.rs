use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("graphical lasso did not converge after {sweeps} sweeps (last change {last_change:e}, objective {objective})")]
    NoConvergence {
        sweeps: usize,
        last_change: f64,
        objective: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Nn(#[from] cdn_nn::NnError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Param(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, detail: impl std::fmt::Display) -> CoreError {
    CoreError::Format {
        path: path.into(),
        detail: detail.to_string(),
    }
}
