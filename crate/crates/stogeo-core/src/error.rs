use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A point left the chart domain or came too close to a chart singularity.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical operation failed (non-SPD matrix, non-finite value, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Mismatched dimensions between arguments.
    #[error("shape error: {0}")]
    Shape(String),

    /// An iterative solver did not converge.
    #[error("convergence error: {0}")]
    Convergence(String),

    /// A Monte Carlo estimator had no usable data.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Grid solver produced values outside its admissible range.
    #[error("scheme error: {0}")]
    Scheme(String),

    /// Positivity of a grid function was violated where a log is taken.
    #[error("positivity error: {0}")]
    Positivity(String),

    /// An operation was called on a form it does not support.
    #[error("unsupported form: {0}")]
    UnsupportedForm(String),

    /// A declared precondition of an operation failed its check.
    #[error("precondition error: {0}")]
    Precondition(String),

    /// Supplied fields are mutually inconsistent.
    #[error("inconsistent field: {0}")]
    InconsistentField(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
