//! Shared report vocabulary: named checks with residuals and tolerances.

use serde::{Deserialize, Serialize};

/// One verification block: `{name, residual, tolerance, pass}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        let pass = residual.is_finite() && residual <= tolerance;
        Self {
            name: name.into(),
            residual,
            tolerance,
            pass,
        }
    }
}

/// True if every block passes.
pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}
