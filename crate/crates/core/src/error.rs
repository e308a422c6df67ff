use thiserror::Error;

pub type Result<T> = std::result::Result<T, EcpcError>;

#[derive(Debug, Error)]
pub enum EcpcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariate {covariate} (1-based) belongs to no group in grouping '{grouping}'")]
    Coverage { covariate: usize, grouping: String },

    #[error("IRLS did not converge within {iterations} iterations (last relative change {last_change:.3e})")]
    NonConvergence {
        iterations: usize,
        last_change: f64,
        last_beta: Vec<f64>,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl EcpcError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        EcpcError::InvalidInput(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        EcpcError::Dimension(msg.into())
    }
}
