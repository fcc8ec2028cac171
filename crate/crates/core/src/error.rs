use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("division domain: {0}")]
    Domain(String),

    #[error("pulse refinement only: requested {requested} segments, pulse already has {existing}")]
    RefinementOnly { requested: usize, existing: usize },

    #[error("expected {expected} coupling values, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("covariance diverged in segment {segment}: |C| reached {magnitude:e}")]
    Divergence { segment: usize, magnitude: f64 },

    #[error("unphysical moment: {0}")]
    Physicality(String),

    #[error("no steady state: drift has eigenvalue {re:e}{im:+e}i with non-negative real part")]
    NoSteadyState { re: f64, im: f64 },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("density matrix lives on the {found} space, expected {expected}")]
    Space { expected: &'static str, found: &'static str },

    #[error("Fock truncation exceeded: top-level population {population:e} > {threshold:e}")]
    Truncation { population: f64, threshold: f64 },

    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("integrator failed: {0}")]
    Integrator(String),

    #[error("g value {value} at index {index} outside [-{bound}, {bound}]")]
    OutOfBounds { index: usize, value: f64, bound: f64 },

    #[error("optimization failed after {restarts} restarts: {reason}")]
    OptimizationFailed { restarts: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
