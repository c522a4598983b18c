use thiserror::Error;

/// Everything that can go wrong while building objectives, grids or flows.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("matrix rejected: {check}")]
    InvalidMatrix { check: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grids do not match")]
    GridMismatch,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("Hessian not positive definite at step {step} (x = {location:?}, smallest eigenvalue {min_eigenvalue:e})")]
    HessianNotPositiveDefinite {
        step: usize,
        location: Vec<f64>,
        min_eigenvalue: f64,
    },

    #[error("objective has no Hessian")]
    MissingHessian,

    #[error("trajectory infeasible: residual {residual:e} exceeds {threshold:e}")]
    Infeasible { residual: f64, threshold: f64 },

    #[error("exp(-H/kT) overflows on the grid (min H/kT = {min_scaled:e})")]
    NormalizationOverflow { min_scaled: f64 },

    #[error("normalization constant is zero")]
    ZeroNormalization,

    #[error("support violation at node {node}: density {value:e} where the reference is below the floor")]
    SupportViolation { node: usize, value: f64 },

    #[error("CFL condition violated: ratio {ratio} > {limit}")]
    CflViolation { ratio: f64, limit: f64 },

    #[error("stability condition violated: ratio {ratio} > {limit}")]
    StabilityViolation { ratio: f64, limit: f64 },

    #[error("negative density {value:e} at node {node}")]
    NegativeDensity { node: usize, value: f64 },

    #[error("operation requires a one-dimensional grid, got dimension {0}")]
    NotOneDimensional(usize),

    #[error("implicit solve failed to converge at t = {time}")]
    SolverFailure { time: f64 },
}

pub type Result<T> = std::result::Result<T, FlowError>;
