//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tree construction, market operations and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// A scenario tree or region violates a structural invariant.
    #[error("structural error: {0}")]
    Structural(String),

    /// A function argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A process that should be a supermartingale drifts upward beyond tolerance.
    #[error("decomposition error: {0}")]
    Decomposition(String),

    /// A stated precondition of an operation is violated.
    #[error("precondition error: {0}")]
    Precondition(String),

    /// Invalid configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// The dual feasible set is empty: the spread admits no martingale selector.
    /// Carries the node at which the backward interval intersection became empty.
    #[error("infeasible market: no consistent price system; first empty spread intersection at node {node} (price interval [{lo:.6}, {hi:.6}] vs reachable [{reach_lo:.6}, {reach_hi:.6}])")]
    Infeasible {
        node: usize,
        lo: f64,
        hi: f64,
        reach_lo: f64,
        reach_hi: f64,
    },

    /// The iterative solver did not reach the requested tolerance.
    #[error("solver error: {message} (iterations {iterations}, best value {best_value}, kkt residual {kkt_residual:.3e})")]
    Solver {
        message: String,
        iterations: usize,
        best_value: f64,
        kkt_residual: f64,
    },

    /// A measure tilt would drive some conditional weight to zero.
    #[error("tilt too large: {0}")]
    TiltTooLarge(String),

    /// Division by a near-zero density or similar numeric failure.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A candidate shadow price leaves the bid-ask spread.
    #[error("extraction error: {0}")]
    Extraction(String),

    /// An internal construction violated one of its own guarantees.
    #[error("construction bug: {0}")]
    ConstructionBug(String),

    /// Guarded oracle refused an oversized instance.
    #[error("guard: {0}")]
    Guard(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 2 = input error, 3 = solver non-convergence,
    /// 1 = failed check (handled by the caller), 0 = success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Solver { .. } => 3,
            Error::Infeasible { .. } => 1,
            _ => 2,
        }
    }
}
