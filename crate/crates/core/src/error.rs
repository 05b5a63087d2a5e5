use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty support for theta index {0}")]
    EmptySupport(usize),

    #[error("empty cluster {0} in clustering assignment")]
    EmptyCluster(usize),

    #[error("degenerate weight update: no particle has positive likelihood (max log-likelihood {max_log_likelihood})")]
    DegenerateUpdate { max_log_likelihood: f64 },

    #[error("propagation produced a non-finite state at particle {particle}")]
    Propagation { particle: usize },

    #[error("simulation produced a non-finite value in {0}")]
    Simulation(&'static str),

    #[error("feature overflow: {0}")]
    Feature(String),

    #[error("model parameters are not finite: {0}")]
    ModelCorrupt(String),

    #[error("gradient check failed: {failed} of {checked} parameters exceed tolerance")]
    GradientCheck { failed: usize, checked: usize },

    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
