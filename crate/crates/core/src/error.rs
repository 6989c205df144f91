use thiserror::Error;

/// Errors raised by the solvers and diagnostics in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("x0 = {x0:?} lies in the closure of the domain")]
    X0InsideDomain { x0: [f64; 2] },
    #[error("time horizon too short: T - 2*delta = {available} must exceed T_min = {t_min}")]
    TimeTooShort { available: f64, t_min: f64 },
    #[error("cut-off margin delta = {0} must be positive")]
    BadDelta(f64),
    #[error("invalid domain: {0}")]
    BadDomain(String),
    #[error("psi = {value} is not positive at node {node}; increase M0")]
    PsiNonPositive { node: usize, value: f64 },
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
    #[error("unknown norm '{0}'")]
    UnknownNorm(String),
    #[error("field size mismatch: expected {expected} values, found {found}")]
    SliceMismatch { expected: usize, found: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("max rho^-2 = {0:e} exceeds 1e300; lower s or lambda, or use the normalized weight")]
    OverflowRisk(f64),
    #[error("linear solver stagnated after {iterations} iterations (relative residual {residual:e})")]
    SolverStagnation { iterations: usize, residual: f64 },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("KKT system is singular")]
    SingularKkt,
    #[error("problem too large for the dense oracle: {0} unknowns")]
    TooLarge(usize),
    #[error("Carleman right-hand side vanishes for a nonzero field")]
    DivisionByZero,
    #[error("CFL number {cfl} exceeds 0.95")]
    CflViolation { cfl: f64 },
    #[error("non-finite or blown-up state at time level {level}")]
    NonFiniteState { level: usize },
    #[error("growth bound violated at r = {r:e}: |value| = {value:e} > bound = {bound:e} ({which})")]
    GrowthViolated {
        r: f64,
        value: f64,
        bound: f64,
        which: &'static str,
    },
    #[error("fixed-point iteration diverged after {iterations} iterations")]
    NoContraction { iterations: usize },
    #[error("unknown nonlinearity '{0}'")]
    UnknownNonlinearity(String),
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;
