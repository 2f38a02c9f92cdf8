use thiserror::Error;

pub type Result<T> = std::result::Result<T, FimError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FimError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl FimError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FimError::InvalidInput(msg.into())
    }

    /// True for failures of the numerical kind (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FimError::Infeasible(_)
                | FimError::DegenerateGeometry(_)
                | FimError::Conditioning(_)
                | FimError::UndefinedMetric(_)
        )
    }
}

impl From<std::io::Error> for FimError {
    fn from(e: std::io::Error) -> Self {
        FimError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for FimError {
    fn from(e: serde_json::Error) -> Self {
        FimError::Format(e.to_string())
    }
}
