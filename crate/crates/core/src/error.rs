use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at batch index {index}")]
    NonFiniteLoss { index: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("non-finite sampler state at step {step}")]
    NonFiniteState { step: usize },

    #[error("non-finite guidance gradient at t = {t}, x_t = {x:?}")]
    NonFiniteGuidance { t: f64, x: Vec<f64> },

    #[error("time {t} outside schedule range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors that originate in user-supplied configuration.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::TomlDe(_))
    }
}
