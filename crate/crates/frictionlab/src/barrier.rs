//! Log-barrier Newton engine with barrier continuation.
//!
//! Minimizes a smooth convex objective over an open polyhedral-style domain
//! `{w : s_i(w) > 0}` with at most one linear equality constraint, by
//! centering `f(w) - mu sum_i ln s_i(w)` along a geometric schedule of
//! barrier weights. Problems supply objective, slack and derivative
//! assembly; the engine owns the continuation loop, the damped Newton step
//! with Armijo backtracking and the KKT residual reporting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Options shared by the primal and dual solvers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Relative KKT residual target.
    pub tol: f64,
    /// Cap on total Newton iterations across all barrier weights.
    pub max_iter: usize,
    /// Multiplier applied to the barrier weight per outer step.
    pub barrier_decay: f64,
    /// Initial barrier weight.
    pub mu_init: f64,
    /// Final barrier weight.
    pub mu_min: f64,
    /// Scale of the symmetric feasible-start trades in the primal solver.
    pub start_eps: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 2000,
            barrier_decay: 0.2,
            mu_init: 1.0,
            // a floor of 1e-10 leaves central-path drift on low-probability
            // leaves above the first-order tolerances; drift shrinks
            // linearly with the floor and Newton stays stable well below it
            mu_min: 1e-13,
            start_eps: 1e-6,
        }
    }
}

/// Convergence diagnostics attached to every solution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub final_mu: f64,
    pub kkt_residual: f64,
}

/// A barrier subproblem: smooth objective plus log barriers on slacks.
pub trait BarrierProblem {
    fn dim(&self) -> usize;

    /// Smooth objective part (minimization convention).
    fn objective(&self, w: &DVector<f64>) -> f64;

    /// Writes all constraint slacks; returns false if any is non-positive.
    fn slacks(&self, w: &DVector<f64>, out: &mut Vec<f64>) -> bool;

    /// Gradient and Hessian of `objective - mu sum ln s_i` at `w`.
    fn grad_hess(&self, w: &DVector<f64>, mu: f64) -> (DVector<f64>, DMatrix<f64>);

    /// Optional single linear equality `c^T w = b`; the start must satisfy it.
    fn equality(&self) -> Option<(DVector<f64>, f64)> {
        None
    }
}

fn barrier_value(problem: &impl BarrierProblem, w: &DVector<f64>, mu: f64, slacks: &mut Vec<f64>) -> Option<f64> {
    if !problem.slacks(w, slacks) {
        return None;
    }
    let logs: f64 = slacks.iter().map(|&s| s.ln()).sum();
    Some(problem.objective(w) - mu * logs)
}

/// Cholesky solve with a diagonal ridge fallback for marginally conditioned
/// Hessians.
fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let n = h.nrows();
    let scale = (h.diagonal().amax()).max(1e-300);
    let mut ridge = 1e-14 * scale;
    for _ in 0..12 {
        let mut hr = h.clone();
        for i in 0..n {
            hr[(i, i)] += ridge;
        }
        if let Some(ch) = hr.cholesky() {
            return Some(ch.solve(rhs));
        }
        ridge *= 100.0;
    }
    None
}

/// Newton step restricted to `{d : c^T d = 0}` when an equality is present.
fn newton_direction(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    equality: Option<&DVector<f64>>,
) -> Option<DVector<f64>> {
    let d0 = solve_spd(h, &(-g))?;
    match equality {
        None => Some(d0),
        Some(c) => {
            let d1 = solve_spd(h, c)?;
            let denom = c.dot(&d1);
            if denom.abs() < 1e-300 {
                return Some(d0);
            }
            let nu = c.dot(&d0) / denom;
            Some(d0 - d1 * nu)
        }
    }
}

/// Minimizes the problem along the barrier path starting from the strictly
/// feasible `w0`.
pub fn minimize(
    problem: &impl BarrierProblem,
    w0: DVector<f64>,
    opts: &SolveOptions,
) -> Result<(DVector<f64>, SolveDiagnostics)> {
    if problem.dim() == 0 {
        return Ok((
            w0,
            SolveDiagnostics {
                iterations: 0,
                final_mu: opts.mu_min,
                kkt_residual: 0.0,
            },
        ));
    }
    let mut slacks = Vec::new();
    if !problem.slacks(&w0, &mut slacks) {
        return Err(Error::ConstructionBug(
            "barrier start is not strictly feasible".into(),
        ));
    }
    if let Some((c, b)) = problem.equality() {
        let gap = (c.dot(&w0) - b).abs();
        if gap > 1e-9 * b.abs().max(1.0) {
            return Err(Error::ConstructionBug(format!(
                "barrier start violates the equality constraint by {:.3e}",
                gap
            )));
        }
    }

    let equality_c = problem.equality().map(|(c, _)| c);
    let mut w = w0;
    let mut total_iters = 0usize;
    let mut mu = opts.mu_init;
    let mut best_value = problem.objective(&w);
    let mut centering = f64::INFINITY;

    loop {
        let at_final = mu <= opts.mu_min * (1.0 + 1e-12);
        let inner_tol = if at_final { 1e-16 } else { 1e-11 };
        let debug = std::env::var("FRICTIONLAB_DEBUG_NEWTON").is_ok();

        for inner in 0..60 {
            if total_iters >= opts.max_iter {
                return Err(Error::Solver {
                    message: "barrier Newton exceeded the iteration cap".into(),
                    iterations: total_iters,
                    best_value,
                    kkt_residual: f64::NAN,
                });
            }
            let (g, h) = problem.grad_hess(&w, mu);
            let d = newton_direction(&h, &g, equality_c.as_ref()).ok_or_else(|| Error::Solver {
                message: "Newton system not positive definite".into(),
                iterations: total_iters,
                best_value,
                kkt_residual: f64::NAN,
            })?;
            total_iters += 1;
            let slope = g.dot(&d);
            let phi0 = barrier_value(problem, &w, mu, &mut slacks)
                .expect("current iterate must stay feasible");
            let decrement = -slope;
            if debug {
                eprintln!(
                    "mu {mu:.2e} inner {inner}: phi {phi0:.12e} decrement {decrement:.3e} |g| {:.3e}",
                    g.amax()
                );
            }
            if at_final {
                centering = centering.min(decrement / (1.0 + phi0.abs()));
            }
            if decrement <= inner_tol * (1.0 + phi0.abs()) {
                break;
            }
            // Armijo backtracking, rejecting steps that leave the domain.
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &w + &d * t;
                if let Some(phi) = barrier_value(problem, &cand, mu, &mut slacks) {
                    if phi <= phi0 + 1e-4 * t * slope {
                        w = cand;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break; // step stalled at this weight; continuation proceeds
            }
            best_value = best_value.min(problem.objective(&w));
        }

        if at_final {
            break;
        }
        mu = (mu * opts.barrier_decay).max(opts.mu_min);
    }

    // Relative KKT residual: centering suboptimality of the final barrier
    // subproblem (the Newton decrement measures the gradient in the metric
    // of the Hessian, which stays meaningful under barrier conditioning)
    // plus the complementarity level mu itself.
    let kkt_residual = centering.max(mu);
    let diagnostics = SolveDiagnostics {
        iterations: total_iters,
        final_mu: mu,
        kkt_residual,
    };
    if kkt_residual > opts.tol.max(opts.mu_min) * 10.0 {
        return Err(Error::Solver {
            message: "barrier Newton did not reach the requested tolerance".into(),
            iterations: total_iters,
            best_value: problem.objective(&w),
            kkt_residual,
        });
    }
    Ok((w, diagnostics))
}
