use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("integer overflow in {0}")]
    Overflow(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid block: {0}")]
    InvalidBlock(String),

    #[error("empty point set")]
    EmptySet,

    #[error("{0} is outside the admissible domain")]
    Domain(String),

    #[error("decay too slow: lambda = {lambda} must exceed d*psi(p) = {threshold}")]
    DecayTooSlow { lambda: f64, threshold: f64 },

    #[error("infeasible parameter system: {0}")]
    Infeasible(String),

    #[error("block {0} is not contained in the grid")]
    NotContained(String),

    #[error("degenerate variance: {0}")]
    Degenerate(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
