use thiserror::Error;

#[derive(Debug, Error)]
pub enum MqarError {
    #[error("infeasible task configuration: {0}")]
    Infeasible(String),

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Layer(#[from] gka::GkaError),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: usize, diagnostics: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MqarError>;
