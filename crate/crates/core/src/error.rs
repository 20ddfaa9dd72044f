use thiserror::Error;

/// Errors produced by the mapping pipeline.
#[derive(Debug, Error)]
pub enum RemError {
    #[error("undefined direction: point coincides with the base station origin")]
    UndefinedDirection,

    #[error("outside region of interest: radius {rho} m exceeds {limit} m")]
    OutsideRegion { rho: f64, limit: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RemError {
    /// Coarse category used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            RemError::Config(_) => "config",
            RemError::Io(_) | RemError::Csv(_) | RemError::Json(_) | RemError::Checkpoint(_) => {
                "io"
            }
            RemError::Data(_) | RemError::Empty(_) => "data",
            RemError::Diverged { .. } | RemError::Numerical(_) => "numerical",
            _ => "domain",
        }
    }
}

pub type Result<T> = std::result::Result<T, RemError>;
