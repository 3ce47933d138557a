use thiserror::Error;

/// Errors produced by grid construction, discretization and the approximation ladder.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("Lyapunov function is not finite at node {node} (coordinates {coords:?})")]
    NonFiniteLyapunov { node: usize, coords: Vec<f64> },

    #[error("W must be >= 1 everywhere; W[{node}] = {value}")]
    WeightBelowOne { node: usize, value: f64 },

    #[error("negative off-diagonal rate {rate} at node {node} (coordinates {coords:?}); refine the grid")]
    NegativeRate { node: usize, coords: Vec<f64>, rate: f64 },

    #[error("covariance is not positive semidefinite at node {node} (coordinates {coords:?})")]
    NotPsd { node: usize, coords: Vec<f64> },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("parameter mismatch: kernel was built at {found}, expected {expected}")]
    ParameterMismatch { expected: f64, found: f64 },

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    #[error("simulation produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("outside hypothesis: {0}")]
    OutsideHypothesis(String),

    #[error("alpha = {alpha} is outside the validity region alpha > (1 + b_v) eps0 = {threshold}")]
    ValidityRegion { alpha: f64, threshold: f64 },

    #[error("witness {n}: gap {gap} exceeds 2^-{n} = {target}")]
    WitnessGap { n: usize, gap: f64, target: f64 },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("reducible chain: invariant measure is not unique")]
    Reducible,

    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
}

pub type Result<T> = std::result::Result<T, Error>;
