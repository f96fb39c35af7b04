use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar argument fell outside its admissible domain (e.g. `t` outside `[0, 1]`).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration value or inconsistent configuration sections.
    #[error("config error: {0}")]
    Config(String),

    /// Array shapes that must agree do not.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid input data, such as an empty batch.
    #[error("input error: {0}")]
    Input(String),

    /// A dataset sample could not be loaded.
    #[error("failed to load sample `{id}`: {reason}")]
    Load { id: String, reason: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss {loss} at step {step} (sigma draws: {sigmas:?})")]
    NonFiniteLoss { step: u64, loss: f64, sigmas: Vec<f64> },

    /// Sampling produced non-finite values mid-trajectory.
    #[error("non-finite sample values at step i={step} (sigma={sigma}, phase={phase})")]
    NonFiniteSample { step: usize, sigma: f64, phase: &'static str },

    /// A checkpoint does not match the configuration it is loaded against.
    #[error("checkpoint mismatch in `{field}`: {detail}")]
    CheckpointMismatch { field: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
