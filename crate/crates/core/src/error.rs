use nalgebra::DVector;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown {kind} `{name}`; valid names: {}", valid.join(", "))]
    UnknownName {
        kind: &'static str,
        name: String,
        valid: Vec<String>,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("step size violates alpha_g * L_g < 1 with exact L_g: alpha_g = {alpha_g}, L_g = {lipschitz}")]
    StepSize { alpha_g: f64, lipschitz: f64 },

    #[error("lower-level iteration diverged at step {step} (last finite iterate norm {})", last_finite.norm())]
    Divergence { step: usize, last_finite: DVector<f64> },

    #[error("Hessian requested within {margin} of a C1-only kink at step {step}")]
    Kink { step: usize, margin: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular lower-level Hessian (min |eigenvalue| = {margin:e})")]
    Singular { margin: f64 },

    #[error("not a critical point: gradient norm {grad_norm:e} exceeds {tol:e}")]
    NotCritical { grad_norm: f64, tol: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("continuation stalled at x = {x:?} after {halvings} step halvings")]
    ContinuationStall {
        x: Vec<f64>,
        y: Vec<f64>,
        halvings: usize,
    },

    #[error(
        "Morse qualification violated between x = {from_x:?} (index {from_index}) and x = {to_x:?} \
         (index {to_index}, min |eigenvalue| {margin:e})"
    )]
    MorseViolation {
        from_x: Vec<f64>,
        from_y: Vec<f64>,
        from_index: usize,
        to_x: Vec<f64>,
        to_y: Vec<f64>,
        to_index: usize,
        margin: f64,
    },
}
