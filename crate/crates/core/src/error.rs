use thiserror::Error;

/// Errors raised by the model, solver and certification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum KfpError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("CFL violation: dt = {dt:e} exceeds the {constraint} bound {bound:e}")]
    Cfl {
        dt: f64,
        bound: f64,
        constraint: &'static str,
    },

    #[error("range error: {0}")]
    Range(String),

    #[error("step budget of {steps} steps exhausted; last residual {residual:e}")]
    BudgetExceeded { steps: usize, residual: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version `{0}`")]
    UnsupportedVersion(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for KfpError {
    fn from(e: std::io::Error) -> Self {
        KfpError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KfpError>;

pub(crate) fn ensure_finite(label: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(KfpError::Domain(format!("{label} contains a non-finite value")))
    }
}
