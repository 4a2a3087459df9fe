//! Duality verification lab: first-order conditions, complementarity, the
//! deflated-portfolio martingale property, compensator sandwich bounds and
//! shadow-price extraction and validation.

use serde::{Deserialize, Serialize};

use crate::barrier::SolveOptions;
use crate::dual::{is_deflator, solve_dual, Deflator, DualSolution};
use crate::error::{Error, Result};
use crate::market::{holdings, is_admissible, liquidation_value, Market, TradingStrategy};
use crate::preferences::UtilitySpec;
use crate::primal::solve_primal;
use crate::report::{all_pass, Check};
use crate::tree::{
    classify_martingale, conditional_expectation, doob_decompose, AdaptedProcess,
    MartingaleClass, ScenarioTree, StoppingRegion,
};

/// Default tolerances of the duality identity checks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DualityTolerances {
    pub gap: f64,
    pub first_order: f64,
    pub complementarity: f64,
    pub product_martingale: f64,
}

impl Default for DualityTolerances {
    fn default() -> Self {
        Self {
            gap: 1e-5,
            first_order: 1e-5,
            complementarity: 1e-6,
            product_martingale: 1e-6,
        }
    }
}

/// Joint primal-dual verification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualityReport {
    pub x: f64,
    pub y_star: f64,
    pub primal_value: f64,
    pub dual_value: f64,
    /// `|u(x) - (v(y*) + x y*)|` relative to `max(1, |u|)`; by weak duality
    /// the envelope at `y*` upper-bounds the conjugate minimum, so this is a
    /// conservative duality gap.
    pub gap: f64,
    /// `max_leaf |h - U'(g)| / h`.
    pub first_order_residual: f64,
    /// `max_leaf |g + V'(h)| / g`.
    pub inverse_first_order_residual: f64,
    /// `|E[g h] - x y|` relative to `x y`.
    pub complementarity_residual: f64,
    /// Martingale residual of the deflated optimal portfolio, relative to
    /// `x y`.
    pub product_martingale_residual: f64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Runs the primal and the dual at `y* = u'(x)` and checks every identity of
/// the duality theorem.
pub fn verify_duality(
    market: &Market,
    spec: &UtilitySpec,
    x: f64,
    tols: &DualityTolerances,
    opts: &SolveOptions,
) -> Result<DualityReport> {
    let primal = solve_primal(market, spec, x, opts)?;
    let y_star = primal.marginal_value;
    let dual = solve_dual(market, spec, y_star, opts)?;
    let tree = market.tree();

    let mut foc = 0.0f64;
    let mut inv_foc = 0.0f64;
    let mut complementarity = 0.0f64;
    for (j, &_l) in tree.leaves().iter().enumerate() {
        let g = primal.terminal_wealth[j];
        let h = dual.terminal[j];
        foc = foc.max((h - spec.marginal(g)).abs() / h);
        inv_foc = inv_foc.max((g + spec.conjugate_marginal(h)).abs() / g);
    }
    let e_gh: f64 = tree
        .leaves()
        .iter()
        .enumerate()
        .map(|(j, &l)| tree.prob(l) * primal.terminal_wealth[j] * dual.terminal[j])
        .sum();
    let xy = x * y_star;
    complementarity = complementarity.max((e_gh - xy).abs() / xy);

    // deflated optimal portfolio: post-trade holdings against y* Z
    let deflated = AdaptedProcess::from_fn(tree, |n| {
        y_star
            * (primal.holdings.bond[n] * dual.price_system.z0[n]
                + primal.holdings.stock[n] * dual.price_system.z1[n])
    });
    let mart = classify_martingale(tree, &deflated, 1e-300)?;
    let product_residual = mart.max_residual / xy;

    let gap = (primal.value - (dual.value + xy)).abs() / primal.value.abs().max(1.0);

    let checks = vec![
        Check::new("duality_gap", gap, tols.gap),
        Check::new("first_order", foc, tols.first_order),
        Check::new("inverse_first_order", inv_foc, tols.first_order),
        Check::new("complementarity", complementarity, tols.complementarity),
        Check::new("product_martingale", product_residual, tols.product_martingale),
    ];
    let pass = all_pass(&checks);
    Ok(DualityReport {
        x,
        y_star,
        primal_value: primal.value,
        dual_value: dual.value,
        gap,
        first_order_residual: foc,
        inverse_first_order_residual: inv_foc,
        complementarity_residual: complementarity,
        product_martingale_residual: product_residual,
        checks,
        pass,
    })
}

/// Sandwich bounds at one starting node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandwichRow {
    pub sigma_node: usize,
    /// Number of one-step levels checked up to the crossing time.
    pub levels: usize,
    /// Minimum of `E[dA^1] - (1-eps)(1-lambda) S_sigma E[dA^0]` over levels.
    pub min_lower_slack: f64,
    /// Minimum of `(1+eps) S_sigma E[dA^0] - E[dA^1]` over levels.
    pub min_upper_slack: f64,
}

/// Report of [`deflator_sandwich`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandwichReport {
    pub eps: f64,
    pub rows: Vec<SandwichRow>,
    pub min_lower_slack: f64,
    pub min_upper_slack: f64,
    /// Grid-realized crossing extremes used by the explicit test strategies.
    pub eps_down_realized: f64,
    pub eps_up_realized: f64,
    pub long_strategy_admissible: bool,
    pub short_strategy_admissible: bool,
    pub long_deflated_class: MartingaleClass,
    pub short_deflated_class: MartingaleClass,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Stops at the first node at or after `s` satisfying `stop`, at depth `k`
/// below `s`, or at the leaf; completed outside the subtree of `s` by the
/// leaves, so the result is a valid stopping region.
fn local_region(
    tree: &ScenarioTree,
    s: usize,
    k: usize,
    stop: &impl Fn(usize) -> bool,
) -> Result<StoppingRegion> {
    let mut ids = Vec::new();
    let mut stack = vec![(s, 0usize)];
    let mut in_subtree = vec![false; tree.len()];
    let mut mark = vec![s];
    in_subtree[s] = true;
    while let Some(m) = mark.pop() {
        for &c in tree.children(m) {
            in_subtree[c] = true;
            mark.push(c);
        }
    }
    while let Some((m, depth)) = stack.pop() {
        if (depth > 0 && stop(m)) || depth == k || tree.is_leaf(m) {
            ids.push(m);
        } else {
            stack.extend(tree.children(m).iter().map(|&c| (c, depth + 1)));
        }
    }
    for &l in tree.leaves() {
        if !in_subtree[l] {
            ids.push(l);
        }
    }
    StoppingRegion::new(tree, ids)
}

/// Price extremes on `[s, crossing]` relative to `S(s)`, crossing included.
fn crossing_extremes(market: &Market, s: usize, eps: f64) -> (f64, f64, Vec<usize>, usize) {
    let tree = market.tree();
    let s_price = market.ask(s);
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    let mut crossing_nodes = Vec::new();
    let mut max_depth = 0usize;
    let mut stack = vec![(s, 0usize)];
    while let Some((m, depth)) = stack.pop() {
        let ratio = market.ask(m) / s_price;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        let crossed = depth > 0 && (ratio <= 1.0 - eps || ratio >= 1.0 + eps);
        if crossed || tree.is_leaf(m) {
            crossing_nodes.push(m);
            max_depth = max_depth.max(depth);
        } else {
            stack.extend(tree.children(m).iter().map(|&c| (c, depth + 1)));
        }
    }
    (lo, hi, crossing_nodes, max_depth)
}

/// Verifies the compensator sandwich for a supermartingale deflator: along
/// every stopping time between `sigma` and the first eps-crossing of the
/// price ratio, the conditional compensator increments satisfy
/// `(1-eps)(1-lambda) S_sigma E[dA^0] <= E[dA^1] <= (1+eps) S_sigma E[dA^0]`.
/// Additionally builds the two explicit one-share test strategies (maximal
/// bid-marked long and ask-covered short over `[sigma, crossing]`, sized by
/// the grid-realized crossing extremes so that tree overshoot cannot break
/// admissibility) and classifies their deflated values.
pub fn deflator_sandwich(
    market: &Market,
    d: &Deflator,
    sigma: &StoppingRegion,
    eps: f64,
) -> Result<SandwichReport> {
    if !(eps > 0.0) {
        return Err(Error::Precondition("eps must be > 0".into()));
    }
    if eps + market.lambda() > 1.0 {
        return Err(Error::Precondition(format!(
            "eps + lambda = {} must be <= 1",
            eps + market.lambda()
        )));
    }
    let tree = market.tree();
    let scale = d.y0[0].max(1.0);
    let a0 = doob_decompose(tree, &d.y0, 1e-8 * scale)?.compensator;
    let a1 = doob_decompose(tree, &d.y1, 1e-8 * scale * market.ask(0).max(1.0))?.compensator;

    let mut rows = Vec::new();
    let mut min_lower = f64::INFINITY;
    let mut min_upper = f64::INFINITY;
    let mut eps_down = 0.0f64;
    let mut eps_up = 0.0f64;
    let mut long_buy = AdaptedProcess::constant(tree, 0.0);
    let mut long_sell = AdaptedProcess::constant(tree, 0.0);
    let mut short_buy = AdaptedProcess::constant(tree, 0.0);
    let mut short_sell = AdaptedProcess::constant(tree, 0.0);

    for &s in sigma.ids() {
        let s_price = market.ask(s);
        let (lo, hi, crossing, max_depth) = crossing_extremes(market, s, eps);
        eps_down = eps_down.max(1.0 - lo);
        eps_up = eps_up.max(hi - 1.0);
        if !tree.is_leaf(s) {
            long_buy[s] += 1.0 / s_price;
            short_sell[s] += 1.0 / s_price;
            for &c in &crossing {
                long_sell[c] += 1.0 / s_price;
                short_buy[c] += 1.0 / s_price;
            }
        }

        let stop = {
            let crossing_set: std::collections::HashSet<usize> = crossing.iter().copied().collect();
            move |m: usize| crossing_set.contains(&m)
        };
        let mut row = SandwichRow {
            sigma_node: s,
            levels: max_depth,
            min_lower_slack: f64::INFINITY,
            min_upper_slack: f64::INFINITY,
        };
        if tree.is_leaf(s) || max_depth == 0 {
            row.min_lower_slack = 0.0;
            row.min_upper_slack = 0.0;
        }
        for k in 1..=max_depth {
            let region = local_region(tree, s, k, &stop)?;
            let da0 = conditional_expectation(tree, &a0, &region, s)? - a0[s];
            let da1 = conditional_expectation(tree, &a1, &region, s)? - a1[s];
            let lower = da1 - (1.0 - eps) * market.bid(s) * da0;
            let upper = (1.0 + eps) * s_price * da0 - da1;
            row.min_lower_slack = row.min_lower_slack.min(lower);
            row.min_upper_slack = row.min_upper_slack.min(upper);
        }
        min_lower = min_lower.min(row.min_lower_slack);
        min_upper = min_upper.min(row.min_upper_slack);
        rows.push(row);
    }

    let eps_down_used = eps.max(eps_down);
    let eps_up_used = eps.max(eps_up);
    let x_long = 1.0 - (1.0 - market.lambda()) * (1.0 - eps_down_used);
    let x_short = market.lambda() + eps_up_used;

    let long = TradingStrategy::new(long_buy, long_sell)?;
    let short = TradingStrategy::new(short_buy, short_sell)?;
    let adm_tol = 1e-9;
    let long_adm = is_admissible(market, &long, x_long, adm_tol)?;
    let short_adm = is_admissible(market, &short, x_short, adm_tol)?;

    let deflated_class = |strategy: &TradingStrategy, x: f64| -> Result<MartingaleClass> {
        let h = holdings(market, strategy, x)?;
        let w = AdaptedProcess::from_fn(tree, |n| h.bond[n] * d.y0[n] + h.stock[n] * d.y1[n]);
        Ok(classify_martingale(tree, &w, 1e-9 * scale)?.class)
    };
    let long_class = deflated_class(&long, x_long)?;
    let short_class = deflated_class(&short, x_short)?;

    let slack_tol = 1e-8 * scale * market.ask(0).max(1.0);
    let super_ok = |c: MartingaleClass| {
        matches!(c, MartingaleClass::Martingale | MartingaleClass::Supermartingale)
    };
    let checks = vec![
        Check::new("sandwich_lower", (-min_lower).max(0.0), slack_tol),
        Check::new("sandwich_upper", (-min_upper).max(0.0), slack_tol),
        Check::new(
            "long_strategy_admissible",
            if long_adm.admissible { 0.0 } else { 1.0 },
            0.0,
        ),
        Check::new(
            "short_strategy_admissible",
            if short_adm.admissible { 0.0 } else { 1.0 },
            0.0,
        ),
        Check::new(
            "long_deflated_supermartingale",
            if super_ok(long_class) { 0.0 } else { 1.0 },
            0.0,
        ),
        Check::new(
            "short_deflated_supermartingale",
            if super_ok(short_class) { 0.0 } else { 1.0 },
            0.0,
        ),
    ];
    let pass = all_pass(&checks);
    Ok(SandwichReport {
        eps,
        rows,
        min_lower_slack: min_lower,
        min_upper_slack: min_upper,
        eps_down_realized: eps_down_used,
        eps_up_realized: eps_up_used,
        long_strategy_admissible: long_adm.admissible,
        short_strategy_admissible: short_adm.admissible,
        long_deflated_class: long_class,
        short_deflated_class: short_class,
        checks,
        pass,
    })
}

/// Grid-adapted default for the sandwich eps: the largest one-step relative
/// price move below any node of `sigma`.
pub fn grid_eps(market: &Market, sigma: &StoppingRegion) -> f64 {
    let tree = market.tree();
    let mut eps = 0.0f64;
    for &s in sigma.ids() {
        let mut stack = vec![s];
        while let Some(m) = stack.pop() {
            for &c in tree.children(m) {
                eps = eps.max((market.ask(c) / market.ask(m) - 1.0).abs());
                stack.push(c);
            }
        }
    }
    eps
}

/// Report of [`local_mart_equivalence`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalMartReport {
    /// False if the candidate is not a deflator (the corollary does not
    /// apply and no equivalence claim is made).
    pub applicable: bool,
    /// Largest compensator increment of `Y^0`, relative to `y`.
    pub y0_compensator: f64,
    /// Largest compensator increment of `Y^1`, relative to `y max(1, S_0)`.
    pub y1_compensator: f64,
    pub y0_is_martingale: bool,
    pub y1_is_martingale: bool,
    pub equivalent: bool,
}

/// On finite trees "local martingale" collapses to "martingale", i.e. zero
/// compensator: for a deflator the first component is a martingale exactly
/// when the second one is.
pub fn local_mart_equivalence(market: &Market, d: &Deflator, tol: f64) -> Result<LocalMartReport> {
    if tol < 0.0 {
        return Err(Error::Precondition("tolerance must be >= 0".into()));
    }
    let tree = market.tree();
    let applicable = is_deflator(market, d, tol.max(1e-9))?.ok;
    let scale = d.y0[0].max(1.0);
    let max_increment = |a: &AdaptedProcess| -> f64 {
        let mut worst = 0.0f64;
        for n in 0..tree.len() {
            if let Some(p) = tree.parent(n) {
                worst = worst.max(a[n] - a[p]);
            }
        }
        worst
    };
    let dec0 = doob_decompose(tree, &d.y0, 1e-8 * scale)?;
    let dec1 = doob_decompose(tree, &d.y1, 1e-8 * scale * market.ask(0).max(1.0))?;
    let c0 = max_increment(&dec0.compensator) / scale;
    let c1 = max_increment(&dec1.compensator) / (scale * market.ask(0).max(1.0));
    let m0 = c0 <= tol;
    let m1 = c1 <= tol;
    Ok(LocalMartReport {
        applicable,
        y0_compensator: c0,
        y1_compensator: c1,
        y0_is_martingale: m0,
        y1_is_martingale: m1,
        equivalent: !applicable || (m0 == m1),
    })
}

/// Report of [`positivity_martingale_check`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositivityReport {
    /// Minimum node-wise liquidation value of the primal optimizer.
    pub min_liquidation: f64,
    pub threshold: f64,
    pub strictly_positive: bool,
    /// Flags instances whose optimal liquidation value nearly touches zero.
    pub flagged_near_zero: bool,
    /// Largest compensator increment of the dual optimizer components
    /// (vanishes since the dual optimum is attained on price systems).
    pub dual_compensator_max: f64,
}

/// Documents the link between strictly positive optimal liquidation value
/// and the martingale property of the optimal dual process.
pub fn positivity_martingale_check(
    market: &Market,
    spec: &UtilitySpec,
    x: f64,
    threshold: f64,
    opts: &SolveOptions,
) -> Result<PositivityReport> {
    if !(threshold > 0.0) {
        return Err(Error::Precondition("threshold must be > 0".into()));
    }
    let tree = market.tree();
    let primal = solve_primal(market, spec, x, opts)?;
    let liq = liquidation_value(market, &primal.holdings);
    let min_liq = liq.values().iter().copied().fold(f64::INFINITY, f64::min);
    let dual = solve_dual(market, spec, primal.marginal_value, opts)?;
    let scale = primal.marginal_value.max(1.0);
    let dec0 = doob_decompose(tree, &dual.price_system.z0, 1e-7 * scale)?;
    let dec1 = doob_decompose(
        tree,
        &dual.price_system.z1,
        1e-7 * scale * market.ask(0).max(1.0),
    )?;
    let cmax = dec0
        .compensator
        .values()
        .iter()
        .chain(dec1.compensator.values())
        .fold(0.0f64, |a, &b| a.max(b));
    Ok(PositivityReport {
        min_liquidation: min_liq,
        threshold,
        strictly_positive: min_liq >= threshold,
        flagged_near_zero: min_liq < threshold,
        dual_compensator_max: cmax,
    })
}

/// A frictionless price selector inside the bid-ask spread.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowPrice {
    pub values: AdaptedProcess,
    /// Dual argument of the solution the selector came from (NaN when built
    /// directly from a process).
    pub source_y: f64,
}

impl ShadowPrice {
    /// Validates spread containment; values are clamped to the exact spread
    /// afterwards to shield the frictionless re-solve from rounding dust.
    pub fn new(market: &Market, values: AdaptedProcess, source_y: f64) -> Result<Self> {
        let tree = market.tree();
        if values.len() != tree.len() {
            return Err(Error::Structural("selector length mismatch".into()));
        }
        let mut clamped = values;
        for n in 0..tree.len() {
            let (lo, hi) = (market.bid(n), market.ask(n));
            let v = clamped[n];
            if v < lo - 1e-9 * hi || v > hi + 1e-9 * hi {
                return Err(Error::Extraction(format!(
                    "selector value {} at node {} outside the spread [{}, {}]",
                    v, n, lo, hi
                )));
            }
            clamped[n] = v.clamp(lo, hi);
        }
        Ok(Self {
            values: clamped,
            source_y,
        })
    }
}

/// Extracts the candidate shadow price `S~ = Z^1 / Z^0` from a dual
/// solution.
pub fn extract_shadow(market: &Market, dual: &DualSolution) -> Result<ShadowPrice> {
    ShadowPrice::new(market, dual.price_system.ratio(), dual.y)
}

/// Report of [`verify_shadow`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowReport {
    pub frictional_value: f64,
    pub frictionless_value: f64,
    /// `|u_frictionless - u_frictional|` relative to `max(1, |u|)`.
    pub value_gap: f64,
    /// Largest relative leaf-wise wealth deviation.
    pub wealth_gap: f64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Solves the frictionless problem at the selector and compares value and
/// terminal wealth with the frictional optimum. Wealths are compared leaf
/// by leaf; trade decompositions are not, since frictionless optimizers are
/// non-unique in volume whenever the selector sits strictly inside the
/// spread.
pub fn verify_shadow(
    market: &Market,
    spec: &UtilitySpec,
    x: f64,
    shadow: &ShadowPrice,
    tol_value: f64,
    tol_wealth: f64,
    opts: &SolveOptions,
) -> Result<ShadowReport> {
    let frictional = solve_primal(market, spec, x, opts)?;
    let frictionless_market = market.frictionless(shadow.values.clone())?;
    let frictionless = solve_primal(&frictionless_market, spec, x, opts)?;
    let value_gap = (frictionless.value - frictional.value).abs()
        / frictional.value.abs().max(1.0);
    let wealth_gap = frictional
        .terminal_wealth
        .iter()
        .zip(&frictionless.terminal_wealth)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(1e-300))
        .fold(0.0, f64::max);
    let checks = vec![
        Check::new("shadow_value_agreement", value_gap, tol_value),
        Check::new("shadow_wealth_agreement", wealth_gap, tol_wealth),
    ];
    let pass = all_pass(&checks);
    Ok(ShadowReport {
        frictional_value: frictional.value,
        frictionless_value: frictionless.value,
        value_gap,
        wealth_gap,
        checks,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::PriceSystem;
    use crate::generate;

    fn opts() -> SolveOptions {
        SolveOptions::default()
    }

    #[test]
    fn log_duality_identities() {
        let market = generate::random_market(3, 2, 0.3, 0.1, 2).unwrap();
        let spec = UtilitySpec::log();
        let x = 2.0;
        let report =
            verify_duality(&market, &spec, x, &DualityTolerances::default(), &opts()).unwrap();
        assert!(report.pass, "{:#?}", report.checks);
        // log: h g = 1 leaf-wise and y* = 1/x
        assert!((report.y_star - 1.0 / x).abs() < 1e-7);
        assert!((report.complementarity_residual) < 1e-6);
    }

    #[test]
    fn duality_battery_on_seeded_trees() {
        for seed in [3u64, 7] {
            let market = generate::random_market(4, 3, 0.25, 0.2, seed).unwrap();
            for spec in [UtilitySpec::log(), UtilitySpec::crra(3.0).unwrap()] {
                let report =
                    verify_duality(&market, &spec, 1.0, &DualityTolerances::default(), &opts())
                        .unwrap();
                assert!(report.pass, "seed {seed} {spec}: {:#?}", report.checks);
            }
        }
    }

    #[test]
    fn sandwich_on_martingale_deflator_is_tight_zero() {
        let market = generate::random_market(3, 2, 0.3, 0.2, 6).unwrap();
        let spec = UtilitySpec::log();
        let sol = solve_dual(&market, &spec, 1.0, &opts()).unwrap();
        let d = Deflator::from_price_system(&sol.price_system, 1.0).unwrap();
        let sigma = StoppingRegion::at_time(market.tree(), 0).unwrap();
        let eps = grid_eps(&market, &sigma);
        let report = deflator_sandwich(&market, &d, &sigma, eps).unwrap();
        assert!(report.pass, "{:#?}", report.checks);
        // compensators vanish for price systems: slacks are zero
        assert!(report.min_lower_slack.abs() < 1e-9);
        assert!(report.min_upper_slack.abs() < 1e-9);
    }

    #[test]
    fn sandwich_on_scaled_deflator_holds_with_slack() {
        let market = generate::random_market(4, 2, 0.25, 0.2, 10).unwrap();
        let spec = UtilitySpec::log();
        let sol = solve_dual(&market, &spec, 1.0, &opts()).unwrap();
        let d = Deflator::from_price_system(&sol.price_system, 1.0)
            .unwrap()
            .time_scaled(market.tree(), |t| 0.92f64.powi(t as i32));
        for t in [0usize, 1, 2] {
            let sigma = StoppingRegion::at_time(market.tree(), t).unwrap();
            let eps = grid_eps(&market, &sigma).min(1.0 - market.lambda() - 1e-9);
            let report = deflator_sandwich(&market, &d, &sigma, eps).unwrap();
            assert!(report.pass, "sigma at t={t}: {:#?}", report.checks);
        }
    }

    #[test]
    fn sandwich_slack_matches_direct_conditional_sums() {
        // independent oracle: compute E[dA | F_sigma] by explicit path sums
        let market = generate::random_market(3, 2, 0.3, 0.15, 12).unwrap();
        let tree = market.tree();
        let spec = UtilitySpec::log();
        let sol = solve_dual(&market, &spec, 1.0, &opts()).unwrap();
        let d = Deflator::from_price_system(&sol.price_system, 1.0)
            .unwrap()
            .time_scaled(tree, |t| 0.9f64.powi(t as i32));
        let a0 = doob_decompose(tree, &d.y0, 1e-9).unwrap().compensator;
        // sigma = root, tau = horizon: E[A_T - A_0] via leaf sums
        let direct: f64 = tree
            .leaves()
            .iter()
            .map(|&l| tree.prob(l) * a0[l])
            .sum();
        let region = StoppingRegion::leaves(tree);
        let via_op = conditional_expectation(tree, &a0, &region, 0).unwrap();
        assert!((direct - via_op).abs() < 1e-14);
        assert!(direct > 1e-6, "scaled deflator must have a real compensator");
    }

    #[test]
    fn sandwich_detects_adversarial_compensator_imbalance() {
        // Y^0 constant (zero compensator) but Y^1 drifting down violates the
        // upper sandwich bound; such a pair is not a deflator either
        let market = generate::random_market(2, 2, 0.3, 0.2, 1).unwrap();
        let tree = market.tree();
        let y0 = AdaptedProcess::constant(tree, 1.0);
        let y1 = AdaptedProcess::from_fn(tree, |n| {
            market.ask(n).min(market.ask(0)) * 0.8f64.powi(tree.time(n) as i32)
        });
        // keep the ratio inside the spread at t = 0 but let it drift
        let d = Deflator::new(y0, y1).unwrap();
        let sigma = StoppingRegion::at_time(tree, 0).unwrap();
        let eps = grid_eps(&market, &sigma).min(1.0 - market.lambda() - 1e-9);
        let report = deflator_sandwich(&market, &d, &sigma, eps).unwrap();
        assert!(
            report.min_upper_slack < -1e-6,
            "upper sandwich should be violated: {report:#?}"
        );
        assert!(!is_deflator(&market, &d, 1e-9).unwrap().ok);
    }

    #[test]
    fn local_mart_equivalence_on_price_system_and_scaled() {
        let market = generate::random_market(3, 2, 0.3, 0.2, 15).unwrap();
        let spec = UtilitySpec::log();
        let sol = solve_dual(&market, &spec, 1.0, &opts()).unwrap();
        let d = Deflator::from_price_system(&sol.price_system, 1.0).unwrap();
        let report = local_mart_equivalence(&market, &d, 1e-8).unwrap();
        assert!(report.applicable);
        assert!(report.y0_is_martingale && report.y1_is_martingale);
        assert!(report.equivalent);

        let scaled = d.time_scaled(market.tree(), |t| 0.9f64.powi(t as i32));
        let report = local_mart_equivalence(&market, &scaled, 1e-8).unwrap();
        assert!(report.applicable);
        assert!(!report.y0_is_martingale && !report.y1_is_martingale);
        assert!(report.equivalent, "{report:#?}");
    }

    #[test]
    fn local_mart_equivalence_flags_non_deflators() {
        let market = generate::random_market(2, 2, 0.3, 0.2, 3).unwrap();
        let tree = market.tree();
        // Y^0 martingale, Y^1 drifting: violates the short-ray condition
        let y0 = AdaptedProcess::constant(tree, 1.0);
        let y1 = AdaptedProcess::from_fn(tree, |n| market.bid(n) * 0.85f64.powi(tree.time(n) as i32));
        let d = Deflator::new(y0, y1).unwrap();
        let report = local_mart_equivalence(&market, &d, 1e-8).unwrap();
        assert!(!report.applicable, "{report:#?}");
    }

    #[test]
    fn positivity_check_reports_positive_minimum_for_log() {
        let market = generate::random_market(3, 2, 0.3, 0.1, 18).unwrap();
        let spec = UtilitySpec::log();
        let report = positivity_martingale_check(&market, &spec, 1.0, 1e-6, &opts()).unwrap();
        assert!(report.strictly_positive, "{report:#?}");
        assert!(report.dual_compensator_max < 1e-8);
    }

    #[test]
    fn shadow_extraction_and_verification() {
        let market = generate::random_market(3, 3, 0.25, 0.15, 20).unwrap();
        let spec = UtilitySpec::crra(2.0).unwrap();
        let x = 1.0;
        let primal = solve_primal(&market, &spec, x, &opts()).unwrap();
        let dual = solve_dual(&market, &spec, primal.marginal_value, &opts()).unwrap();
        let shadow = extract_shadow(&market, &dual).unwrap();
        let report = verify_shadow(&market, &spec, x, &shadow, 1e-5, 1e-4, &opts()).unwrap();
        assert!(report.pass, "{report:#?}");
    }

    #[test]
    fn frictionless_market_is_its_own_shadow() {
        let market = generate::random_market(3, 2, 0.3, 0.0, 25).unwrap();
        let spec = UtilitySpec::log();
        let shadow = ShadowPrice::new(&market, market.price().clone(), f64::NAN).unwrap();
        let report = verify_shadow(&market, &spec, 1.5, &shadow, 1e-9, 1e-8, &opts()).unwrap();
        assert!(report.pass, "{report:#?}");
        assert_eq!(report.value_gap, 0.0);
    }

    #[test]
    fn extraction_rejects_out_of_spread_ratio() {
        let market = generate::random_market(2, 2, 0.3, 0.1, 30).unwrap();
        let tree = market.tree();
        let bad = DualSolution {
            price_system: PriceSystem::new(
                AdaptedProcess::constant(tree, 1.0),
                AdaptedProcess::from_fn(tree, |n| market.ask(n) * 1.2),
            )
            .unwrap(),
            terminal: vec![],
            value: 0.0,
            marginal_value: 0.0,
            y: 1.0,
            diagnostics: crate::barrier::SolveDiagnostics {
                iterations: 0,
                final_mu: 0.0,
                kkt_residual: 0.0,
            },
        };
        assert!(matches!(
            extract_shadow(&market, &bad),
            Err(Error::Extraction(_))
        ));
    }
}
