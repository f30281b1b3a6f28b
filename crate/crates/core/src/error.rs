use thiserror::Error;

use crate::protocol::Diagnostic;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("site {site} out of range for a layout with {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("operands live on different space layouts")]
    LayoutMismatch,

    #[error("operator is not Hermitian (relative deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("propagation time must be non-negative, got {0}")]
    NegativeTime(f64),

    #[error("no unique steady state: {0}")]
    NoUniqueSteadyState(String),

    #[error("iteration did not converge: {0}")]
    NoConvergence(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("phase grid too short: variable `{var}` needs at least {needed} points, got {got}")]
    PhaseGridTooShort { var: String, needed: usize, got: usize },

    #[error("unknown axis `{0}`")]
    UnknownAxis(String),

    #[error("axis mismatch: {0}")]
    AxisMismatch(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("invalid protocol ({} diagnostics)", .0.len())]
    Protocol(Vec<Diagnostic>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoUniqueSteadyState(_) | Error::NoConvergence(_) | Error::Linalg(_)
        )
    }
}
