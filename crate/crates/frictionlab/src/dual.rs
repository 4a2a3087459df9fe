//! Dual solver: minimize `E[V(y Z^0_T)]` over consistent price systems on
//! the tree, plus membership checks for the consistent-price-system and
//! supermartingale-deflator classes.
//!
//! Both components are parametrized by their terminal leaf values; interior
//! node values are conditional expectations of the terminal ones, so the
//! martingale property is structural and only two kinds of constraints
//! remain: strict positivity of the terminal density and the bid-ask spread
//! inequalities at every node, all affine in the leaf variables. The single
//! equality `E[zeta^0] = 1` pins the root density. On finite trees local
//! martingales are martingales, so the consistent-price-system class and its
//! local variant coincide and the dual infimum over deflators is attained on
//! consistent price systems; supermartingale deflators appear in
//! verification only.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{self, BarrierProblem, SolveDiagnostics, SolveOptions};
use crate::error::{Error, Result};
use crate::market::Market;
use crate::preferences::UtilitySpec;
use crate::primal::{solve_primal, CurvePoint};
use crate::tree::{classify_martingale, AdaptedProcess, MartingaleClass, ScenarioTree};

/// A candidate consistent price system: `Z^0` strictly positive with root
/// value 1, `Z^1` non-negative, both martingales, ratio inside the spread.
/// Full validation against a market happens in [`is_cps`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceSystem {
    pub z0: AdaptedProcess,
    pub z1: AdaptedProcess,
}

impl PriceSystem {
    pub fn new(z0: AdaptedProcess, z1: AdaptedProcess) -> Result<Self> {
        if z0.len() != z1.len() {
            return Err(Error::Structural("component length mismatch".into()));
        }
        if !z0.values().iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::Domain("Z^0 must be strictly positive".into()));
        }
        if (z0[0] - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "Z^0 root value {} must be 1",
                z0[0]
            )));
        }
        if !z1.values().iter().all(|&v| v >= 0.0 && v.is_finite()) {
            return Err(Error::Domain("Z^1 must be non-negative".into()));
        }
        Ok(Self { z0, z1 })
    }

    /// Spread-valued ratio `Z^1 / Z^0`.
    pub fn ratio(&self) -> AdaptedProcess {
        self.z1.zip_with(&self.z0, |a, b| a / b)
    }
}

/// A supermartingale deflator candidate `(Y^0, Y^1)`; the root of `Y^0` is
/// the dual argument `y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Deflator {
    pub y0: AdaptedProcess,
    pub y1: AdaptedProcess,
}

impl Deflator {
    pub fn new(y0: AdaptedProcess, y1: AdaptedProcess) -> Result<Self> {
        if y0.len() != y1.len() {
            return Err(Error::Structural("component length mismatch".into()));
        }
        let ok = |p: &AdaptedProcess| p.values().iter().all(|&v| v >= 0.0 && v.is_finite());
        if !ok(&y0) || !ok(&y1) {
            return Err(Error::Domain("deflator components must be non-negative".into()));
        }
        Ok(Self { y0, y1 })
    }

    pub fn from_price_system(ps: &PriceSystem, y: f64) -> Result<Self> {
        Self::new(ps.z0.map(|v| y * v), ps.z1.map(|v| y * v))
    }

    pub fn y(&self) -> f64 {
        self.y0[0]
    }

    /// Scales both components by a deterministic function of time.
    pub fn time_scaled(&self, tree: &ScenarioTree, factor: impl Fn(usize) -> f64) -> Self {
        let f = |p: &AdaptedProcess| {
            AdaptedProcess::from_fn(tree, |n| p[n] * factor(tree.time(n)))
        };
        Self {
            y0: f(&self.y0),
            y1: f(&self.y1),
        }
    }
}

/// Solution of the dual problem at argument `y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualSolution {
    pub price_system: PriceSystem,
    /// Terminal dual optimizer `h = y Z^0_T` per leaf, ordered as
    /// `tree.leaves()`.
    pub terminal: Vec<f64>,
    /// Optimal value `v(y)`.
    pub value: f64,
    /// `v'(y) = E[V'(y Z^0_T) Z^0_T]` (envelope form).
    pub marginal_value: f64,
    pub y: f64,
    pub diagnostics: SolveDiagnostics,
}

/// Report of [`is_cps`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CpsReport {
    pub feasible: bool,
    /// Largest one-step martingale drift of either component, normalized by
    /// the node scale `max(1, Z^0 max(1, S))`.
    pub max_martingale_residual: f64,
    /// Largest spread violation `max((1-l)S Z^0 - Z^1, Z^1 - S Z^0)^+`,
    /// normalized the same way.
    pub max_spread_violation: f64,
}

/// Report of [`is_deflator`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeflatorReport {
    pub ok: bool,
    /// Largest upward one-step drift of either component (supermartingales
    /// must drift down).
    pub max_supermartingale_violation: f64,
    /// Largest spread violation of `Y^1 / Y^0` where `Y^0 > 0`.
    pub max_spread_violation: f64,
    /// Largest upward drift of a deflated extreme-ray position: pure bond
    /// `(1, 0)`, bid-marked long `(-(1-l)S, 1)` and ask-covered short
    /// `(S, -1)`, the generators of the one-step admissible cone.
    pub max_portfolio_violation: f64,
}

/// Strictly feasible starting point: a measure change and a spread selector
/// constructed by a backward reachability pass and a forward realization
/// pass. Returns leaf densities and leaf selector values.
struct FeasibleStart {
    zeta0: Vec<f64>,
    zeta1: Vec<f64>,
}

fn feasible_start(market: &Market) -> Result<FeasibleStart> {
    let tree = market.tree();
    // backward pass over true spread intervals: certificate on emptiness
    let mut lo = vec![0.0f64; tree.len()];
    let mut hi = vec![0.0f64; tree.len()];
    for n in (0..tree.len()).rev() {
        let (mut l, mut h) = (market.bid(n), market.ask(n));
        if !tree.is_leaf(n) {
            let reach_lo = tree
                .children(n)
                .iter()
                .map(|&c| lo[c])
                .fold(f64::INFINITY, f64::min);
            let reach_hi = tree
                .children(n)
                .iter()
                .map(|&c| hi[c])
                .fold(f64::NEG_INFINITY, f64::max);
            l = l.max(reach_lo);
            h = h.min(reach_hi);
            if l >= h {
                return Err(Error::Infeasible {
                    node: n,
                    lo: market.bid(n),
                    hi: market.ask(n),
                    reach_lo,
                    reach_hi,
                });
            }
        }
        lo[n] = l;
        hi[n] = h;
    }

    // forward pass: realize a strictly interior selector with strictly
    // positive conditional weights
    let mut selector = vec![0.0f64; tree.len()];
    let mut density = vec![1.0f64; tree.len()]; // Q(n) / P(n)
    let interior = |n: usize, v: f64| v.clamp(lo[n] + 0.01 * (hi[n] - lo[n]), hi[n] - 0.01 * (hi[n] - lo[n]));
    selector[0] = interior(0, 0.5 * (lo[0] + hi[0]));
    let mut stack = vec![0usize];
    while let Some(n) = stack.pop() {
        if tree.is_leaf(n) {
            continue;
        }
        let tau = selector[n];
        let children = tree.children(n);
        let mut s: Vec<f64> = children.iter().map(|&c| interior(c, tau)).collect();
        // guarantee realizability: a value strictly below and strictly above
        // tau unless every child can sit exactly at it
        let needs_split = s.iter().any(|&v| (v - tau).abs() > 0.0);
        if needs_split {
            if !s.iter().any(|&v| v < tau) {
                let (i, &c) = children
                    .iter()
                    .enumerate()
                    .min_by(|a, b| lo[*a.1].total_cmp(&lo[*b.1]))
                    .expect("non-leaf has children");
                if lo[c] < tau {
                    s[i] = tau - 0.5 * (tau - lo[c]).min(0.5 * (hi[c] - lo[c]));
                }
            }
            if !s.iter().any(|&v| v > tau) {
                let (i, &c) = children
                    .iter()
                    .enumerate()
                    .max_by(|a, b| hi[*a.1].total_cmp(&hi[*b.1]))
                    .expect("non-leaf has children");
                if hi[c] > tau {
                    s[i] = tau + 0.5 * (hi[c] - tau).min(0.5 * (hi[c] - lo[c]));
                }
            }
        }
        // exact weights: q_c = p_c (1 + t (s_c - mean)) matched to tau, with
        // damped re-centering when positivity binds
        let p: Vec<f64> = children.iter().map(|&c| tree.cond_prob(c)).collect();
        let mut q = p.clone();
        for _ in 0..64 {
            let mean: f64 = q.iter().zip(&s).map(|(&w, &v)| w * v).sum();
            if (mean - tau).abs() <= 1e-13 * tau.abs().max(1.0) {
                break;
            }
            let var: f64 = q
                .iter()
                .zip(&s)
                .map(|(&w, &v)| w * (v - mean) * (v - mean))
                .sum();
            if var <= 0.0 {
                break;
            }
            let mut t = (tau - mean) / var;
            let t_max = s
                .iter()
                .zip(&q)
                .filter(|&(&v, _)| (v - mean).abs() > 0.0)
                .map(|(&v, _)| 0.9 / (v - mean).abs())
                .fold(f64::INFINITY, f64::min);
            t = t.clamp(-t_max, t_max);
            for (w, &v) in q.iter_mut().zip(&s) {
                *w *= 1.0 + t * (v - mean);
            }
            let mass: f64 = q.iter().sum();
            for w in q.iter_mut() {
                *w /= mass;
            }
        }
        for ((&c, &sc), &qc) in children.iter().zip(&s).zip(&q) {
            if !(qc > 0.0) {
                return Err(Error::ConstructionBug(
                    "feasible-start weights lost positivity".into(),
                ));
            }
            selector[c] = sc;
            density[c] = density[n] * qc / tree.cond_prob(c);
            stack.push(c);
        }
    }

    let zeta0: Vec<f64> = tree.leaves().iter().map(|&l| density[l]).collect();
    let zeta1: Vec<f64> = tree
        .leaves()
        .iter()
        .map(|&l| density[l] * selector[l])
        .collect();
    Ok(FeasibleStart { zeta0, zeta1 })
}

/// Affine form over the leaf variables.
struct Affine {
    terms: Vec<(usize, f64)>,
}

impl Affine {
    fn eval(&self, w: &DVector<f64>) -> f64 {
        self.terms.iter().map(|&(v, c)| c * w[v]).sum()
    }
}

struct DualBarrier<'a> {
    dim: usize,
    spec: &'a UtilitySpec,
    y: f64,
    /// `V(y z)` scales by `y^(1 - 1/gamma)` for CRRA; dividing it out makes
    /// the central path independent of `y`, so solutions at different `y`
    /// agree on the density to machine precision.
    obj_scale: f64,
    leaf_prob: Vec<f64>,
    constraints: Vec<Affine>,
    equality: DVector<f64>,
}

impl BarrierProblem for DualBarrier<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn objective(&self, w: &DVector<f64>) -> f64 {
        self.leaf_prob
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let z = w[j];
                if z > 0.0 {
                    p * self.spec.conjugate(self.y * z) / self.obj_scale
                } else {
                    f64::INFINITY
                }
            })
            .sum()
    }

    fn slacks(&self, w: &DVector<f64>, out: &mut Vec<f64>) -> bool {
        out.clear();
        let mut ok = true;
        for a in &self.constraints {
            let s = a.eval(w);
            ok &= s > 0.0;
            out.push(s);
        }
        ok
    }

    fn grad_hess(&self, w: &DVector<f64>, mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (j, &p) in self.leaf_prob.iter().enumerate() {
            let z = self.y * w[j];
            g[j] += p * self.y * self.spec.conjugate_marginal(z) / self.obj_scale;
            h[(j, j)] += p * self.y * self.y * self.spec.conjugate_second(z) / self.obj_scale;
        }
        if mu != 0.0 {
            for a in &self.constraints {
                let s = a.eval(w);
                let gs = -mu / s;
                let hs = mu / (s * s);
                for &(v, c) in &a.terms {
                    g[v] += gs * c;
                }
                for &(v1, c1) in &a.terms {
                    for &(v2, c2) in &a.terms {
                        h[(v1, v2)] += hs * c1 * c2;
                    }
                }
            }
        }
        (g, h)
    }

    fn equality(&self) -> Option<(DVector<f64>, f64)> {
        Some((self.equality.clone(), 1.0))
    }
}

/// Conditional-expectation process of terminal leaf values.
fn lift_terminal(tree: &ScenarioTree, leaf_values: &[f64]) -> AdaptedProcess {
    let mut z = AdaptedProcess::constant(tree, 0.0);
    for (j, &l) in tree.leaves().iter().enumerate() {
        z[l] = leaf_values[j];
    }
    for n in (0..tree.len()).rev() {
        if !tree.is_leaf(n) {
            z[n] = tree
                .children(n)
                .iter()
                .map(|&c| tree.cond_prob(c) * z[c])
                .sum();
        }
    }
    z
}

/// Per-leaf weights `P_l / P_m` of the conditional expectation at `m`.
fn node_leaf_weights(tree: &ScenarioTree) -> Vec<Vec<(usize, f64)>> {
    let leaf_index: std::collections::HashMap<usize, usize> = tree
        .leaves()
        .iter()
        .enumerate()
        .map(|(j, &l)| (l, j))
        .collect();
    let mut lists: Vec<Vec<(usize, f64)>> = vec![Vec::new(); tree.len()];
    for n in (0..tree.len()).rev() {
        if tree.is_leaf(n) {
            lists[n] = vec![(leaf_index[&n], 1.0)];
        } else {
            let mut acc = Vec::new();
            for &c in tree.children(n) {
                let w = tree.cond_prob(c);
                acc.extend(lists[c].iter().map(|&(j, u)| (j, w * u)));
            }
            lists[n] = acc;
        }
    }
    lists
}

/// Minimizes `E[V(y Z^0_T)]` over consistent price systems.
pub fn solve_dual(
    market: &Market,
    spec: &UtilitySpec,
    y: f64,
    opts: &SolveOptions,
) -> Result<DualSolution> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("dual argument {} must be > 0", y)));
    }
    if market.lambda() == 0.0 {
        return Err(Error::Precondition(
            "the dual solver requires lambda > 0 (a frictionless spread has no interior)".into(),
        ));
    }
    let tree = market.tree();
    let leaves = tree.leaves();
    let nl = leaves.len();
    let dim = 2 * nl;

    let start = feasible_start(market)?;
    if tree.horizon() == 0 {
        // single-node tree: Z^0 = 1 forced, value = V(y)
        let z0 = AdaptedProcess(vec![1.0]);
        let z1 = AdaptedProcess(vec![start.zeta1[0]]);
        return Ok(DualSolution {
            price_system: PriceSystem::new(z0, z1)?,
            terminal: vec![y],
            value: spec.conjugate(y),
            marginal_value: spec.conjugate_marginal(y),
            y,
            diagnostics: SolveDiagnostics {
                iterations: 0,
                final_mu: opts.mu_min,
                kkt_residual: 0.0,
            },
        });
    }

    let weights = node_leaf_weights(tree);
    let mut constraints = Vec::new();
    // strict positivity of the terminal density
    for j in 0..nl {
        constraints.push(Affine {
            terms: vec![(j, 1.0)],
        });
    }
    // spread inequalities at every node over derived conditional values
    for m in 0..tree.len() {
        let mut above = Vec::with_capacity(2 * weights[m].len());
        let mut below = Vec::with_capacity(2 * weights[m].len());
        for &(j, u) in &weights[m] {
            above.push((nl + j, u));
            above.push((j, -market.bid(m) * u));
            below.push((j, market.ask(m) * u));
            below.push((nl + j, -u));
        }
        constraints.push(Affine { terms: above });
        constraints.push(Affine { terms: below });
    }
    let mut equality = DVector::zeros(dim);
    for (j, &l) in leaves.iter().enumerate() {
        equality[j] = tree.prob(l);
    }

    let obj_scale = match spec.family {
        crate::preferences::UtilityFamily::Log => 1.0,
        crate::preferences::UtilityFamily::Crra { gamma } => y.powf(1.0 - 1.0 / gamma),
    };
    let problem = DualBarrier {
        dim,
        spec,
        y,
        obj_scale,
        leaf_prob: leaves.iter().map(|&l| tree.prob(l)).collect(),
        constraints,
        equality,
    };
    let mut w0 = DVector::zeros(dim);
    for j in 0..nl {
        w0[j] = start.zeta0[j];
        w0[nl + j] = start.zeta1[j];
    }
    let (w, diagnostics) = barrier::minimize(&problem, w0, opts)?;

    let zeta0: Vec<f64> = (0..nl).map(|j| w[j]).collect();
    let zeta1: Vec<f64> = (0..nl).map(|j| w[nl + j]).collect();
    let z0 = lift_terminal(tree, &zeta0);
    let z1 = lift_terminal(tree, &zeta1);
    let mut value = 0.0;
    let mut marginal = 0.0;
    let mut terminal = Vec::with_capacity(nl);
    for (j, &l) in leaves.iter().enumerate() {
        let p = tree.prob(l);
        value += p * spec.conjugate(y * zeta0[j]);
        marginal += p * spec.conjugate_marginal(y * zeta0[j]) * zeta0[j];
        terminal.push(y * zeta0[j]);
    }
    Ok(DualSolution {
        price_system: PriceSystem::new(z0, z1)?,
        terminal,
        value,
        marginal_value: marginal,
        y,
        diagnostics,
    })
}

fn node_scale(market: &Market, z0: &AdaptedProcess, n: usize) -> f64 {
    (z0[n] * market.ask(n).max(1.0)).max(1.0)
}

/// Checks the three defining conditions of a consistent price system.
pub fn is_cps(market: &Market, z: &PriceSystem, tol: f64) -> Result<CpsReport> {
    if tol < 0.0 {
        return Err(Error::Precondition("tolerance must be >= 0".into()));
    }
    let tree = market.tree();
    if z.z0.len() != tree.len() {
        return Err(Error::Structural("price system length mismatch".into()));
    }
    let mut mart = 0.0f64;
    for n in tree.non_leaves() {
        let scale = node_scale(market, &z.z0, n);
        for comp in [&z.z0, &z.z1] {
            let e: f64 = tree
                .children(n)
                .iter()
                .map(|&c| tree.cond_prob(c) * comp[c])
                .sum();
            mart = mart.max((e - comp[n]).abs() / scale);
        }
    }
    let mut spread = 0.0f64;
    for n in 0..tree.len() {
        let scale = node_scale(market, &z.z0, n);
        let below = market.bid(n) * z.z0[n] - z.z1[n];
        let above = z.z1[n] - market.ask(n) * z.z0[n];
        spread = spread.max(below.max(above).max(0.0) / scale);
    }
    let root_ok = (z.z0[0] - 1.0).abs() <= tol;
    Ok(CpsReport {
        feasible: root_ok && mart <= tol && spread <= tol,
        max_martingale_residual: mart,
        max_spread_violation: spread,
    })
}

/// Checks the defining conditions of an optional strong supermartingale
/// deflator on a finite tree: both components supermartingales, the ratio
/// spread-valued where `Y^0 > 0`, and the deflated value of every one-step
/// admissible position a supermartingale. The one-step admissible positions
/// form a cone generated by the pure bond `(1, 0)`, the bid-marked maximal
/// long `(-(1-l)S, 1)` and the ask-covered short `(S, -1)`, so drift checks
/// on the generators suffice.
pub fn is_deflator(market: &Market, d: &Deflator, tol: f64) -> Result<DeflatorReport> {
    if tol < 0.0 {
        return Err(Error::Precondition("tolerance must be >= 0".into()));
    }
    let tree = market.tree();
    if d.y0.len() != tree.len() {
        return Err(Error::Structural("deflator length mismatch".into()));
    }
    let y_scale = d.y0[0].max(1.0);
    let mut super_violation = 0.0f64;
    let mut portfolio_violation = 0.0f64;
    for n in tree.non_leaves() {
        let drift = |p: &AdaptedProcess| -> f64 {
            tree.children(n)
                .iter()
                .map(|&c| tree.cond_prob(c) * p[c])
                .sum::<f64>()
                - p[n]
        };
        let d0 = drift(&d.y0);
        let d1 = drift(&d.y1);
        let scale = y_scale * market.ask(n).max(1.0);
        super_violation = super_violation.max(d0 / y_scale).max(d1 / scale);
        // cone generators of one-step admissible positions
        let long = -market.bid(n) * d0 + d1;
        let short = market.ask(n) * d0 - d1;
        portfolio_violation = portfolio_violation
            .max(d0 / y_scale)
            .max(long / scale)
            .max(short / scale);
    }
    let mut spread_violation = 0.0f64;
    for n in 0..tree.len() {
        if d.y0[n] <= 0.0 {
            continue;
        }
        let scale = d.y0[n] * market.ask(n).max(1.0);
        let below = market.bid(n) * d.y0[n] - d.y1[n];
        let above = d.y1[n] - market.ask(n) * d.y0[n];
        spread_violation = spread_violation.max(below.max(above).max(0.0) / scale);
    }
    Ok(DeflatorReport {
        ok: super_violation <= tol && spread_violation <= tol && portfolio_violation <= tol,
        max_supermartingale_violation: super_violation,
        max_spread_violation: spread_violation,
        max_portfolio_violation: portfolio_violation,
    })
}

/// Batch dual solves over a sorted grid of dual arguments.
pub fn v_curve(
    market: &Market,
    spec: &UtilitySpec,
    ys: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<CurvePoint>> {
    if ys.iter().any(|&y| !(y > 0.0)) {
        return Err(Error::Domain("dual arguments must be positive".into()));
    }
    if ys.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("dual grid must be sorted".into()));
    }
    let solved: Vec<DualSolution> = ys
        .iter()
        .map(|&y| solve_dual(market, spec, y, opts))
        .collect::<Result<_>>()?;
    Ok(crate::primal::curve_points(
        ys,
        &solved
            .iter()
            .map(|s| (s.value, s.marginal_value))
            .collect::<Vec<_>>(),
    ))
}

/// Conjugate cross-check `|u(x) - min_y (v(y) + x y)|`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CrossCheck {
    pub primal_value: f64,
    pub dual_envelope: f64,
    pub gap: f64,
    pub y_star: f64,
}

/// Evaluates the conjugate envelope on a log-grid refined around the
/// first-order point `y* = u'(x)`. With `grid_points = 0` only `y*` is
/// used, which by weak duality still upper-bounds the true envelope and so
/// yields a conservative gap.
pub fn conjugate_cross_check(
    market: &Market,
    spec: &UtilitySpec,
    x: f64,
    grid_points: usize,
    opts: &SolveOptions,
) -> Result<CrossCheck> {
    let primal = solve_primal(market, spec, x, opts)?;
    let y_star = primal.marginal_value;
    let mut best = f64::INFINITY;
    let eval = |y: f64| -> Result<f64> {
        let d = solve_dual(market, spec, y, opts)?;
        Ok(d.value + x * y)
    };
    best = best.min(eval(y_star)?);
    if grid_points >= 2 {
        let mut center = y_star;
        let mut span = 0.35f64;
        for _ in 0..3 {
            let mut best_y = center;
            for i in 0..grid_points {
                let t = -span + 2.0 * span * i as f64 / (grid_points - 1) as f64;
                let y = center * t.exp();
                let v = eval(y)?;
                if v < best {
                    best = v;
                    best_y = y;
                }
            }
            center = best_y;
            span *= 0.3;
        }
    }
    Ok(CrossCheck {
        primal_value: primal.value,
        dual_envelope: best,
        gap: (primal.value - best).abs(),
        y_star,
    })
}

/// Convenience: classification report for both components of a price system.
pub fn component_classes(
    tree: &ScenarioTree,
    z: &PriceSystem,
    tol: f64,
) -> Result<(MartingaleClass, MartingaleClass)> {
    Ok((
        classify_martingale(tree, &z.z0, tol)?.class,
        classify_martingale(tree, &z.z1, tol)?.class,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate;
    use crate::tree::Node;

    fn one_period(s0: f64, s_up: f64, s_dn: f64, p_up: f64, lambda: f64) -> Market {
        let nodes = vec![
            Node { id: 0, parent: None, t: 0, p: 1.0 },
            Node { id: 1, parent: Some(0), t: 1, p: p_up },
            Node { id: 2, parent: Some(0), t: 1, p: 1.0 - p_up },
        ];
        let tree = ScenarioTree::new(1, nodes).unwrap();
        Market::new(tree, AdaptedProcess(vec![s0, s_up, s_dn]), lambda).unwrap()
    }

    #[test]
    fn binomial_boundary_optimum_matches_hand_computation() {
        // log utility wants the density q = p; the spread forces q to the
        // boundary q_max = (S0 - (1-l) Sd) / ((1-l)(Su - Sd))
        let (su, sd, p, lambda) = (2.0, 0.9, 0.5, 0.1);
        let market = one_period(1.0, su, sd, p, lambda);
        let spec = UtilitySpec::log();
        let y = 1.0;
        let sol = solve_dual(&market, &spec, y, &SolveOptions::default()).unwrap();
        let q_max = (1.0 - (1.0 - lambda) * sd) / ((1.0 - lambda) * (su - sd));
        assert!(q_max < p, "instance must force the boundary");
        let v_hand = p * spec.conjugate(y * q_max / p)
            + (1.0 - p) * spec.conjugate(y * (1.0 - q_max) / (1.0 - p));
        assert!(
            (sol.value - v_hand).abs() < 1e-6,
            "solver {} vs hand {}",
            sol.value,
            v_hand
        );
        let z_up = sol.price_system.z0[1];
        assert!((z_up - q_max / p).abs() < 1e-4, "{z_up} vs {}", q_max / p);
    }

    #[test]
    fn constant_price_in_spread_is_feasible() {
        let market = one_period(1.0, 1.05, 0.9, 0.5, 0.3);
        let c = 0.85;
        let tree = market.tree();
        let z = PriceSystem::new(
            AdaptedProcess::constant(tree, 1.0),
            AdaptedProcess::constant(tree, c),
        )
        .unwrap();
        let report = is_cps(&market, &z, 1e-12).unwrap();
        assert!(report.feasible, "{report:?}");
    }

    #[test]
    fn solver_output_is_a_cps_and_a_deflator() {
        let market = generate::random_market(4, 3, 0.25, 0.15, 21).unwrap();
        let spec = UtilitySpec::crra(2.0).unwrap();
        let sol = solve_dual(&market, &spec, 1.3, &SolveOptions::default()).unwrap();
        let report = is_cps(&market, &sol.price_system, 1e-8).unwrap();
        assert!(report.feasible, "{report:?}");
        let d = Deflator::from_price_system(&sol.price_system, 1.3).unwrap();
        let dreport = is_deflator(&market, &d, 1e-8).unwrap();
        assert!(dreport.ok, "{dreport:?}");
    }

    #[test]
    fn perturbed_systems_fail_the_checks() {
        let market = generate::random_market(3, 2, 0.3, 0.2, 9).unwrap();
        let spec = UtilitySpec::log();
        let sol = solve_dual(&market, &spec, 1.0, &SolveOptions::default()).unwrap();
        // ratio pushed above the ask
        let scaled = PriceSystem::new(
            sol.price_system.z0.clone(),
            sol.price_system.z1.map(|v| v * (1.0 + 2.0 * market.lambda())),
        )
        .unwrap();
        let report = is_cps(&market, &scaled, 1e-8).unwrap();
        assert!(!report.feasible);
        assert!(report.max_spread_violation > 1e-3);
        // one interior node value bumped breaks the martingale property
        let mut z0 = sol.price_system.z0.clone();
        let interior = market.tree().level(1)[0];
        z0[interior] += 0.05;
        let bumped = PriceSystem::new(z0, sol.price_system.z1.clone()).unwrap();
        let report = is_cps(&market, &bumped, 1e-8).unwrap();
        assert!(!report.feasible);
        assert!(report.max_martingale_residual > 1e-3);
    }

    #[test]
    fn scaled_price_system_is_still_a_deflator() {
        let market = generate::random_market(3, 3, 0.25, 0.2, 33).unwrap();
        let spec = UtilitySpec::log();
        let sol = solve_dual(&market, &spec, 1.0, &SolveOptions::default()).unwrap();
        let d = Deflator::from_price_system(&sol.price_system, 1.0).unwrap();
        // deterministic decreasing factor keeps the deflator property
        let scaled = d.time_scaled(market.tree(), |t| 0.9f64.powi(t as i32));
        let report = is_deflator(&market, &scaled, 1e-9).unwrap();
        assert!(report.ok, "{report:?}");
        assert!(report.max_supermartingale_violation <= 1e-9);
        // pushing the ratio outside the spread breaks condition (b)
        let broken = Deflator::new(scaled.y0.clone(), scaled.y1.map(|v| v * 1.5)).unwrap();
        let report = is_deflator(&market, &broken, 1e-9).unwrap();
        assert!(!report.ok);
    }

    #[test]
    fn log_dual_shifts_additively_in_y() {
        let market = generate::random_market(3, 2, 0.3, 0.1, 4).unwrap();
        let spec = UtilitySpec::log();
        let opts = SolveOptions::default();
        let v1 = solve_dual(&market, &spec, 1.0, &opts).unwrap();
        let y = 2.5;
        let vy = solve_dual(&market, &spec, y, &opts).unwrap();
        assert!((vy.value - (v1.value - y.ln())).abs() < 1e-7);
        // Z^0 independent of y for log utility
        for n in 0..market.tree().len() {
            assert!(
                (vy.price_system.z0[n] - v1.price_system.z0[n]).abs() < 1e-8,
                "node {n}"
            );
        }
    }

    #[test]
    fn dual_scaling_in_y_is_the_identity_on_the_density() {
        let market = generate::random_market(3, 2, 0.25, 0.2, 14).unwrap();
        let spec = UtilitySpec::crra(3.0).unwrap();
        let opts = SolveOptions::default();
        let s1 = solve_dual(&market, &spec, 1.0, &opts).unwrap();
        let y = 1.9;
        let sy = solve_dual(&market, &spec, y, &opts).unwrap();
        for (a, b) in sy.terminal.iter().zip(&s1.terminal) {
            assert!((a / y - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn v_is_convex_in_y() {
        let market = generate::random_market(3, 2, 0.3, 0.15, 8).unwrap();
        let spec = UtilitySpec::crra(0.5).unwrap();
        let ys = [0.5, 0.8, 1.2, 2.0, 3.0];
        let curve = v_curve(&market, &spec, &ys, &SolveOptions::default()).unwrap();
        for w in curve.windows(3) {
            let s01 = (w[1].value - w[0].value) / (w[1].arg - w[0].arg);
            let s12 = (w[2].value - w[1].value) / (w[2].arg - w[1].arg);
            assert!(s12 >= s01 - 1e-9, "v not convex");
        }
    }

    #[test]
    fn strong_duality_on_random_trees() {
        for seed in [2u64, 5, 16] {
            let market = generate::random_market(3, 3, 0.3, 0.1, seed).unwrap();
            let spec = UtilitySpec::log();
            let check =
                conjugate_cross_check(&market, &spec, 1.0, 0, &SolveOptions::default()).unwrap();
            assert!(
                check.gap <= 1e-5 * check.primal_value.abs().max(1.0),
                "seed {seed}: gap {}",
                check.gap
            );
        }
    }

    #[test]
    fn arbitrage_tree_yields_a_certificate() {
        // both children above the root ask: no martingale selector fits
        let market = one_period(1.0, 1.2, 1.1, 0.5, 0.01);
        let err = solve_dual(&market, &UtilitySpec::log(), 1.0, &SolveOptions::default())
            .unwrap_err();
        match err {
            Error::Infeasible { node, .. } => assert_eq!(node, 0),
            other => panic!("expected infeasibility certificate, got {other}"),
        }
    }

    #[test]
    fn rejects_frictionless_dual() {
        let market = one_period(1.0, 1.2, 0.9, 0.5, 0.0);
        assert!(matches!(
            solve_dual(&market, &UtilitySpec::log(), 1.0, &SolveOptions::default()),
            Err(Error::Precondition(_))
        ));
    }
}
