//! Primal solver: maximize expected utility of the terminal liquidation
//! value over admissible trading strategies on a scenario tree.
//!
//! Decision variables are per-node trade volumes; holdings are eliminated
//! through the equality form of the self-financing constraint, so the
//! feasible set is `{trades >= 0, node-wise liquidation value >= 0}` and a
//! log-barrier Newton method with barrier continuation applies directly.
//! Terminal wealth enters through epigraph variables bounded by the two
//! linear liquidation branches at each leaf, which keeps the objective
//! smooth across the sign kink of the forced terminal trade.
//!
//! With `lambda = 0` the kink disappears and the solver switches to signed
//! net-trade variables; the buy/sell split would otherwise leave a flat
//! cost-free round-trip direction in the barrier.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{self, BarrierProblem, SolveDiagnostics, SolveOptions};
use crate::error::{Error, Result};
use crate::market::{holdings, HoldingsProcess, Market, TradingStrategy};
use crate::preferences::UtilitySpec;
use crate::tree::AdaptedProcess;

/// Wealth floor (relative to `x`) below which a terminal node signals a
/// mis-posed instance: Inada forces optimal wealth strictly positive.
const DEGENERATE_WEALTH: f64 = 1e-12;

/// Solution of the frictional utility maximization problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimalSolution {
    pub strategy: TradingStrategy,
    pub holdings: HoldingsProcess,
    /// Terminal wealth per leaf, ordered as `tree.leaves()`.
    pub terminal_wealth: Vec<f64>,
    /// Optimal value `u(x)`.
    pub value: f64,
    /// Marginal value `u'(x) = E[U'(g)]` (envelope form of the budget
    /// multiplier).
    pub marginal_value: f64,
    pub x: f64,
    pub diagnostics: SolveDiagnostics,
}

/// One row of [`u_curve`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub arg: f64,
    pub value: f64,
    /// Derivative from the solver's first-order conditions.
    pub derivative: f64,
    /// Central finite difference of `value` over the grid (endpoints one-sided).
    pub derivative_fd: f64,
}

/// Affine constraint: `constant + sum coeff_i w_{var_i} > 0`.
struct Affine {
    constant: f64,
    terms: Vec<(usize, f64)>,
}

impl Affine {
    fn eval(&self, w: &DVector<f64>) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * w[v]).sum::<f64>()
    }
}

/// Log-barrier problem shared by both primal formulations: minimize
/// `-sum_l P_l U(g_l(w))` over affine wealth maps subject to affine slacks.
struct PrimalBarrier<'a> {
    dim: usize,
    spec: &'a UtilitySpec,
    /// Leaf probability and wealth map per leaf. In the frictional
    /// formulation the wealth map is a single epigraph variable.
    leaf_prob: Vec<f64>,
    leaf_wealth: Vec<Affine>,
    constraints: Vec<Affine>,
}


impl BarrierProblem for PrimalBarrier<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn objective(&self, w: &DVector<f64>) -> f64 {
        -self
            .leaf_prob
            .iter()
            .zip(&self.leaf_wealth)
            .map(|(&p, a)| {
                let g = a.eval(w);
                if g > 0.0 {
                    p * self.spec.u(g)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .sum::<f64>()
    }

    fn slacks(&self, w: &DVector<f64>, out: &mut Vec<f64>) -> bool {
        out.clear();
        let mut ok = true;
        for a in &self.constraints {
            let s = a.eval(w);
            ok &= s > 0.0;
            out.push(s);
        }
        // utility domain: terminal wealth strictly positive
        for a in &self.leaf_wealth {
            ok &= a.eval(w) > 0.0;
        }
        ok
    }

    fn grad_hess(&self, w: &DVector<f64>, mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (a, &p) in self.leaf_wealth.iter().zip(&self.leaf_prob) {
            let gl = a.eval(w);
            let du = -p * self.spec.marginal(gl);
            let d2u = -p * self.spec.second(gl);
            for &(v, c) in &a.terms {
                g[v] += du * c;
            }
            for &(v1, c1) in &a.terms {
                for &(v2, c2) in &a.terms {
                    h[(v1, v2)] += d2u * c1 * c2;
                }
            }
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
}

/// Per-node cumulative effect of every trade variable on the post-trade
/// holdings at that node: entries `(var, d_bond, d_stock)`.
fn path_effects(
    market: &Market,
    var_of: impl Fn(usize) -> Vec<(usize, f64, f64)>,
) -> Vec<Vec<(usize, f64, f64)>> {
    let tree = market.tree();
    let mut effects: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); tree.len()];
    for n in 0..tree.len() {
        let mut e = match tree.parent(n) {
            Some(p) => effects[p].clone(),
            None => Vec::new(),
        };
        e.extend(var_of(n));
        effects[n] = e;
    }
    effects
}

fn solution_from_strategy(
    market: &Market,
    spec: &UtilitySpec,
    x: f64,
    strategy: TradingStrategy,
    diagnostics: SolveDiagnostics,
) -> Result<PrimalSolution> {
    let tree = market.tree();
    let h = holdings(market, &strategy, x)?;
    let mut terminal_wealth = Vec::with_capacity(tree.leaves().len());
    let mut value = 0.0;
    let mut marginal = 0.0;
    for &l in tree.leaves() {
        let g = h.bond[l];
        if g <= DEGENERATE_WEALTH * x {
            return Err(Error::Solver {
                message: format!(
                    "terminal wealth {:.3e} at leaf {} collapsed to the boundary; instance looks mis-posed",
                    g, l
                ),
                iterations: diagnostics.iterations,
                best_value: f64::NAN,
                kkt_residual: diagnostics.kkt_residual,
            });
        }
        terminal_wealth.push(g);
        value += tree.prob(l) * spec.u(g);
        marginal += tree.prob(l) * spec.marginal(g);
    }
    Ok(PrimalSolution {
        strategy,
        holdings: h,
        terminal_wealth,
        value,
        marginal_value: marginal,
        x,
        diagnostics,
    })
}

/// Completes per-node trades with the forced leaf liquidation and nets
/// simultaneous buys and sells.
fn complete_strategy(market: &Market, mut buy: AdaptedProcess, mut sell: AdaptedProcess) -> Result<TradingStrategy> {
    let tree = market.tree();
    // forced liquidation: leaf trade offsets the inherited stock position
    let interim = TradingStrategy::new(buy.clone(), sell.clone())?;
    let h = holdings(market, &interim, 1.0)?; // any x; only stock matters here
    for &l in tree.leaves() {
        let inherited = match tree.parent(l) {
            Some(p) => h.stock[p],
            None => 0.0,
        };
        buy[l] = (-inherited).max(0.0);
        sell[l] = inherited.max(0.0);
    }
    Ok(TradingStrategy::new(buy, sell)?.netted())
}

/// Frictional formulation: buy/sell volumes at non-leaf nodes plus epigraph
/// wealth variables per leaf.
fn solve_frictional(
    market: &Market,
    spec: &UtilitySpec,
    x: f64,
    opts: &SolveOptions,
) -> Result<PrimalSolution> {
    let tree = market.tree();
    let lambda = market.lambda();
    let non_leaves = tree.non_leaves();
    let k = non_leaves.len();
    let leaves = tree.leaves();
    let dim = 2 * k + leaves.len();

    let mut var_buy = vec![usize::MAX; tree.len()];
    let mut var_sell = vec![usize::MAX; tree.len()];
    for (i, &n) in non_leaves.iter().enumerate() {
        var_buy[n] = 2 * i;
        var_sell[n] = 2 * i + 1;
    }
    let effects = path_effects(market, |n| {
        if var_buy[n] == usize::MAX {
            Vec::new()
        } else {
            vec![
                (var_buy[n], -market.ask(n), 1.0),
                (var_sell[n], market.bid(n), -1.0),
            ]
        }
    });

    let mut constraints = Vec::new();
    // trade positivity
    for i in 0..2 * k {
        constraints.push(Affine {
            constant: 0.0,
            terms: vec![(i, 1.0)],
        });
    }
    // post-trade liquidation value at every non-leaf node, split into the
    // two linear branches bond + bid * stock and bond + ask * stock
    for &n in &non_leaves {
        for price in [market.bid(n), market.ask(n)] {
            constraints.push(Affine {
                constant: x,
                terms: effects[n]
                    .iter()
                    .map(|&(v, db, ds)| (v, db + price * ds))
                    .collect(),
            });
        }
    }
    // leaf epigraph: wealth variable below both liquidation branches of the
    // inherited position, and positive
    let mut leaf_wealth = Vec::new();
    let mut leaf_prob = Vec::new();
    for (j, &l) in leaves.iter().enumerate() {
        let gv = 2 * k + j;
        let inherited = match tree.parent(l) {
            Some(p) => effects[p].as_slice(),
            None => &[],
        };
        for price in [market.bid(l), market.ask(l)] {
            let mut terms: Vec<(usize, f64)> = inherited
                .iter()
                .map(|&(v, db, ds)| (v, db + price * ds))
                .collect();
            terms.push((gv, -1.0));
            constraints.push(Affine { constant: x, terms });
        }
        constraints.push(Affine {
            constant: 0.0,
            terms: vec![(gv, 1.0)],
        });
        leaf_wealth.push(Affine {
            constant: 0.0,
            terms: vec![(gv, 1.0)],
        });
        leaf_prob.push(tree.prob(l));
    }

    let problem = PrimalBarrier {
        dim,
        spec,
        leaf_prob,
        leaf_wealth,
        constraints,
    };

    // feasible start: tiny symmetric trades keep every barrier term interior
    let mut eps = opts.start_eps;
    let w0 = loop {
        let mut w = DVector::zeros(dim);
        for &n in &non_leaves {
            let e = eps * x / market.ask(n);
            w[var_buy[n]] = e;
            w[var_sell[n]] = e;
        }
        // wealth start strictly below both leaf branches
        let mut ok = true;
        for (j, &l) in leaves.iter().enumerate() {
            let inherited = match tree.parent(l) {
                Some(p) => effects[p].as_slice(),
                None => &[],
            };
            let branch = |price: f64| {
                x + inherited
                    .iter()
                    .map(|&(v, db, ds)| (db + price * ds) * w[v])
                    .sum::<f64>()
            };
            let cap = branch(market.bid(l)).min(branch(market.ask(l)));
            if cap <= 0.0 {
                ok = false;
                break;
            }
            w[2 * k + j] = 0.5 * cap;
        }
        let mut slacks = Vec::new();
        if ok && problem.slacks(&w, &mut slacks) {
            break w;
        }
        eps *= 0.1;
        if eps < 1e-300 {
            return Err(Error::ConstructionBug(
                "could not build a strictly feasible primal start".into(),
            ));
        }
    };

    let (w, diagnostics) = barrier::minimize(&problem, w0, opts)?;

    let mut buy = AdaptedProcess::constant(tree, 0.0);
    let mut sell = AdaptedProcess::constant(tree, 0.0);
    for &n in &non_leaves {
        buy[n] = w[var_buy[n]].max(0.0);
        sell[n] = w[var_sell[n]].max(0.0);
    }
    let strategy = complete_strategy(market, buy, sell)?;
    solution_from_strategy(market, spec, x, strategy, diagnostics)
    // lambda is only used through market prices above; silence the lint
    .map(|s| {
        let _ = lambda;
        s
    })
}

/// Frictionless formulation: one signed net trade per non-leaf node. Wide
/// box slacks keep the barrier domain bounded; a solution pressing against
/// the box signals an arbitrage (unbounded) instance.
fn solve_frictionless(
    market: &Market,
    spec: &UtilitySpec,
    x: f64,
    opts: &SolveOptions,
) -> Result<PrimalSolution> {
    let tree = market.tree();
    let non_leaves = tree.non_leaves();
    let k = non_leaves.len();
    let mut var_of = vec![usize::MAX; tree.len()];
    for (i, &n) in non_leaves.iter().enumerate() {
        var_of[n] = i;
    }
    let effects = path_effects(market, |n| {
        if var_of[n] == usize::MAX {
            Vec::new()
        } else {
            vec![(var_of[n], -market.ask(n), 1.0)]
        }
    });

    let box_bound: Vec<f64> = non_leaves
        .iter()
        .map(|&n| 1e6 * x / market.ask(n))
        .collect();

    let mut constraints = Vec::new();
    // wealth at every node (liquidation value collapses to one branch)
    for m in 0..tree.len() {
        let source = if tree.is_leaf(m) {
            match tree.parent(m) {
                Some(p) => effects[p].as_slice(),
                None => &[],
            }
        } else {
            effects[m].as_slice()
        };
        constraints.push(Affine {
            constant: x,
            terms: source
                .iter()
                .map(|&(v, db, ds)| (v, db + market.ask(m) * ds))
                .collect(),
        });
    }
    // safety box
    for (i, &b) in box_bound.iter().enumerate() {
        constraints.push(Affine {
            constant: b,
            terms: vec![(i, 1.0)],
        });
        constraints.push(Affine {
            constant: b,
            terms: vec![(i, -1.0)],
        });
    }
    let mut leaf_wealth = Vec::new();
    let mut leaf_prob = Vec::new();
    for &l in tree.leaves() {
        let source = match tree.parent(l) {
            Some(p) => effects[p].as_slice(),
            None => &[],
        };
        leaf_wealth.push(Affine {
            constant: x,
            terms: source
                .iter()
                .map(|&(v, db, ds)| (v, db + market.ask(l) * ds))
                .collect(),
        });
        leaf_prob.push(tree.prob(l));
    }

    let problem = PrimalBarrier {
        dim: k,
        spec,
        leaf_prob,
        leaf_wealth,
        constraints,
    };
    let (w, diagnostics) = barrier::minimize(&problem, DVector::zeros(k), opts)?;

    for (i, &b) in box_bound.iter().enumerate() {
        if w[i].abs() > 0.99 * b {
            return Err(Error::Solver {
                message: "frictionless trades diverged to the safety box; the price selector admits arbitrage".into(),
                iterations: diagnostics.iterations,
                best_value: -problem.objective(&w),
                kkt_residual: diagnostics.kkt_residual,
            });
        }
    }

    let mut buy = AdaptedProcess::constant(tree, 0.0);
    let mut sell = AdaptedProcess::constant(tree, 0.0);
    for &n in &non_leaves {
        let d = w[var_of[n]];
        buy[n] = d.max(0.0);
        sell[n] = (-d).max(0.0);
    }
    let strategy = complete_strategy(market, buy, sell)?;
    solution_from_strategy(market, spec, x, strategy, diagnostics)
}

/// Maximizes `E[U(V_T^liq(strategy))]` over admissible strategies starting
/// from the endowment `(x, 0)`.
pub fn solve_primal(
    market: &Market,
    spec: &UtilitySpec,
    x: f64,
    opts: &SolveOptions,
) -> Result<PrimalSolution> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("initial endowment {} must be > 0", x)));
    }
    let tree = market.tree();
    if tree.horizon() == 0 {
        // no trading dates: terminal wealth is the endowment
        let strategy = TradingStrategy::zero(tree);
        return solution_from_strategy(
            market,
            spec,
            x,
            strategy,
            SolveDiagnostics {
                iterations: 0,
                final_mu: opts.mu_min,
                kkt_residual: 0.0,
            },
        );
    }
    if market.lambda() == 0.0 {
        solve_frictionless(market, spec, x, opts)
    } else {
        solve_frictional(market, spec, x, opts)
    }
}

/// Exhaustive refinement oracle over net trade volumes per node. Guarded to
/// trees with at most three trading nodes.
pub fn brute_force_primal(
    market: &Market,
    spec: &UtilitySpec,
    x: f64,
    grid_size: usize,
) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain("endowment must be > 0".into()));
    }
    let tree = market.tree();
    let non_leaves = tree.non_leaves();
    if non_leaves.len() > 3 {
        return Err(Error::Guard(format!(
            "brute force limited to 3 trading nodes, tree has {}",
            non_leaves.len()
        )));
    }
    if grid_size < 5 {
        return Err(Error::Precondition("grid size must be at least 5".into()));
    }
    if tree.horizon() == 0 {
        return Ok(spec.u(x));
    }

    let evaluate = |net: &[f64]| -> f64 {
        let mut buy = AdaptedProcess::constant(tree, 0.0);
        let mut sell = AdaptedProcess::constant(tree, 0.0);
        for (i, &n) in non_leaves.iter().enumerate() {
            buy[n] = net[i].max(0.0);
            sell[n] = (-net[i]).max(0.0);
        }
        let Ok(strategy) = complete_strategy(market, buy, sell) else {
            return f64::NEG_INFINITY;
        };
        let Ok(h) = holdings(market, &strategy, x) else {
            return f64::NEG_INFINITY;
        };
        // admissibility: liquidation value non-negative everywhere
        let liq = crate::market::liquidation_value(market, &h);
        if liq.values().iter().any(|&v| v < -1e-12 * x) {
            return f64::NEG_INFINITY;
        }
        let mut value = 0.0;
        for &l in tree.leaves() {
            let g = h.bond[l];
            if g <= 0.0 {
                return f64::NEG_INFINITY;
            }
            value += tree.prob(l) * spec.u(g);
        }
        value
    };

    let dims = non_leaves.len();
    let mut center = vec![0.0; dims];
    let mut half: Vec<f64> = non_leaves
        .iter()
        .map(|&n| 20.0 * x / market.ask(n))
        .collect();
    let mut best_net = center.clone();
    let mut best = evaluate(&best_net);

    for _round in 0..10 {
        let axes: Vec<Vec<f64>> = (0..dims)
            .map(|d| {
                (0..grid_size)
                    .map(|i| {
                        center[d] - half[d]
                            + 2.0 * half[d] * i as f64 / (grid_size - 1) as f64
                    })
                    .collect()
            })
            .collect();
        let mut idx = vec![0usize; dims];
        loop {
            let net: Vec<f64> = (0..dims).map(|d| axes[d][idx[d]]).collect();
            let v = evaluate(&net);
            if v > best {
                best = v;
                best_net = net;
            }
            // odometer over the cartesian grid
            let mut d = 0;
            loop {
                if d == dims {
                    break;
                }
                idx[d] += 1;
                if idx[d] < grid_size {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == dims {
                break;
            }
        }
        center = best_net.clone();
        for h in &mut half {
            *h *= 2.5 / (grid_size - 1) as f64;
        }
    }

    if best == f64::NEG_INFINITY {
        return Err(Error::Solver {
            message: "brute force found no admissible point".into(),
            iterations: 0,
            best_value: f64::NEG_INFINITY,
            kkt_residual: f64::NAN,
        });
    }
    Ok(best)
}

/// Batch solves over a sorted grid of endowments with derivative
/// cross-checks.
pub fn u_curve(
    market: &Market,
    spec: &UtilitySpec,
    xs: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<CurvePoint>> {
    if xs.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Domain("endowments must be positive".into()));
    }
    if xs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("endowment grid must be sorted".into()));
    }
    let solved: Vec<PrimalSolution> = xs
        .iter()
        .map(|&x| solve_primal(market, spec, x, opts))
        .collect::<Result<_>>()?;
    Ok(curve_points(xs, &solved.iter().map(|s| (s.value, s.marginal_value)).collect::<Vec<_>>()))
}

pub(crate) fn curve_points(args: &[f64], vals: &[(f64, f64)]) -> Vec<CurvePoint> {
    let n = args.len();
    (0..n)
        .map(|i| {
            let fd = if n == 1 {
                f64::NAN
            } else if i == 0 {
                (vals[1].0 - vals[0].0) / (args[1] - args[0])
            } else if i == n - 1 {
                (vals[n - 1].0 - vals[n - 2].0) / (args[n - 1] - args[n - 2])
            } else {
                (vals[i + 1].0 - vals[i - 1].0) / (args[i + 1] - args[i - 1])
            };
            CurvePoint {
                arg: args[i],
                value: vals[i].0,
                derivative: vals[i].1,
                derivative_fd: fd,
            }
        })
        .collect()
}
