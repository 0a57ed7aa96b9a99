use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pacm_core::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Training hit a non-finite loss; the last finite posterior was kept.
    #[error("training aborted at step {step}: {message}")]
    Aborted { step: usize, message: String },
}

pub type CliResult<T> = std::result::Result<T, CliError>;
