//! Stability experiments: perturb endowment, dual argument, preferences and
//! the physical measure along geometric schedules, then measure convergence
//! of value functions, derivatives, optimizers and optimal dual processes.
//!
//! Measure perturbations are realized by exponential tilts of the
//! conditional child weights; each tilt carries its exact density process
//! so that deflators can be mapped between the base and tilted measures.
//! Dual problems under a perturbed measure are solved natively on the
//! tilted tree, and the measure-change proposition is then verified as a
//! statement about the outputs rather than used as the solve mechanism.
//! Convex combinations of optimal dual processes are realized as running
//! Cesaro averages.

use serde::{Deserialize, Serialize};

use crate::barrier::SolveOptions;
use crate::dual::{is_deflator, solve_dual, Deflator};
use crate::duality::{verify_shadow, ShadowPrice, ShadowReport};
use crate::error::{Error, Result};
use crate::market::Market;
use crate::preferences::UtilitySpec;
use crate::primal::solve_primal;
use crate::report::{all_pass, Check};
use crate::tree::{AdaptedProcess, ScenarioTree};

/// Exponential tilt of conditional transition probabilities together with
/// its exact density process `Z~_t = E[dP_n/dP | F_t]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureTilt {
    pub density: AdaptedProcess,
    /// Total variation distance between the tilted and base leaf measures.
    pub total_variation: f64,
}

/// Tilts children weights at each non-leaf node by `exp(+-theta)` with the
/// sign alternating over the child index, then renormalizes. `theta` has one
/// component per non-leaf node in `tree.non_leaves()` order. A zero
/// component leaves that node's weights bit-for-bit unchanged.
pub fn tilt_measure(tree: &ScenarioTree, theta: &[f64]) -> Result<(MeasureTilt, ScenarioTree)> {
    let non_leaves = tree.non_leaves();
    if theta.len() != non_leaves.len() {
        return Err(Error::Config(format!(
            "theta has {} components but the tree has {} non-leaf nodes",
            theta.len(),
            non_leaves.len()
        )));
    }
    if theta.iter().any(|t| t.abs() > 30.0) {
        return Err(Error::TiltTooLarge(
            "tilt component beyond exp(30) would denormalize weights".into(),
        ));
    }
    let mut p = vec![0.0f64; tree.len()];
    for n in 0..tree.len() {
        p[n] = tree.cond_prob(n);
    }
    for (&n, &t) in non_leaves.iter().zip(theta) {
        if t == 0.0 {
            continue;
        }
        let children = tree.children(n);
        let mut mass = 0.0;
        for (i, &c) in children.iter().enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            p[c] = tree.cond_prob(c) * (sign * t).exp();
            mass += p[c];
        }
        for &c in children {
            p[c] /= mass;
            if !(p[c] > 0.0) {
                return Err(Error::TiltTooLarge(format!(
                    "tilted weight underflowed at node {}",
                    c
                )));
            }
        }
    }
    let tilted = tree.with_cond_probs(&p)?;
    let density = AdaptedProcess::from_fn(tree, |n| tilted.prob(n) / tree.prob(n));
    let total_variation = 0.5
        * tree
            .leaves()
            .iter()
            .map(|&l| (tilted.prob(l) - tree.prob(l)).abs())
            .sum::<f64>();
    Ok((
        MeasureTilt {
            density,
            total_variation,
        },
        tilted,
    ))
}

/// Direction of a deflator measure change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasureDirection {
    /// `h` lives under the tilted measure; `h Z~` lives under the base one.
    TiltedToBase,
    /// `h` lives under the base measure; `h / Z~` lives under the tilted one.
    BaseToTilted,
}

/// Maps a deflator across a measure tilt by multiplying or dividing both
/// components by the density process.
pub fn deflator_measure_change(
    d: &Deflator,
    tilt: &MeasureTilt,
    direction: MeasureDirection,
) -> Result<Deflator> {
    if d.y0.len() != tilt.density.len() {
        return Err(Error::Structural("density length mismatch".into()));
    }
    let apply = |p: &AdaptedProcess| -> Result<AdaptedProcess> {
        let mut out = p.clone();
        for n in 0..p.len() {
            let z = tilt.density[n];
            out[n] = match direction {
                MeasureDirection::TiltedToBase => p[n] * z,
                MeasureDirection::BaseToTilted => {
                    if z < 1e-12 {
                        return Err(Error::Numeric(format!(
                            "density {} too small at node {} to divide",
                            z, n
                        )));
                    }
                    p[n] / z
                }
            };
        }
        Ok(out)
    };
    Deflator::new(apply(&d.y0)?, apply(&d.y1)?)
}

/// Geometric perturbation schedule for `(x_n, y_n, U_n, P_n)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationSchedule {
    pub x: f64,
    pub y: f64,
    pub spec: UtilitySpec,
    /// Endowment perturbation: `x_n = x (1 + 2^-n a)`.
    pub a: f64,
    /// Dual argument perturbation: `y_n = y (1 + 2^-n b)`.
    pub b: f64,
    /// Utility perturbation passed to `UtilitySpec::perturbed`.
    pub kappa: f64,
    /// Base tilt vector, one component per non-leaf node; step `n` uses
    /// `2^-n theta`.
    pub theta: Vec<f64>,
    pub steps: u32,
}

impl PerturbationSchedule {
    pub fn row(&self, n: u32) -> Result<(f64, f64, UtilitySpec, Vec<f64>)> {
        let factor = 0.5f64.powi(n as i32);
        Ok((
            self.x * (1.0 + factor * self.a),
            self.y * (1.0 + factor * self.b),
            self.spec.perturbed(n, self.kappa)?,
            self.theta.iter().map(|&t| factor * t).collect(),
        ))
    }
}

/// One row of the static stability table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StabilityRow {
    pub n: u32,
    pub x_n: f64,
    pub y_n: f64,
    pub total_variation: f64,
    pub u_n: f64,
    pub v_n: f64,
    pub u_err: f64,
    pub v_err: f64,
    pub du_err: f64,
    pub dv_err: f64,
    /// `E[|g_n - g| ^ 1]` under the base measure.
    pub primal_dist: f64,
    /// `E[|h_n - h| ^ 1]` under the base measure.
    pub dual_dist: f64,
}

/// Static stability report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub base_u: f64,
    pub base_v: f64,
    pub base_du: f64,
    pub base_dv: f64,
    pub rows: Vec<StabilityRow>,
    /// Geometric-mean step ratio per error family
    /// (u, v, u', v', primal, dual, tv).
    pub fitted_rates: Vec<(String, f64)>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn l0_distance(tree: &ScenarioTree, a: &[f64], b: &[f64]) -> f64 {
    tree.leaves()
        .iter()
        .enumerate()
        .map(|(j, &l)| tree.prob(l) * (a[j] - b[j]).abs().min(1.0))
        .sum()
}

fn fitted_rate(errs: &[f64]) -> f64 {
    let pairs: Vec<f64> = errs
        .windows(2)
        .filter(|w| w[0] > 1e-14 && w[1] > 1e-14)
        .map(|w| w[1] / w[0])
        .collect();
    if pairs.is_empty() {
        f64::NAN
    } else {
        (pairs.iter().map(|r| r.ln()).sum::<f64>() / pairs.len() as f64).exp()
    }
}

/// Solves every perturbed instance and records the convergence of values,
/// derivatives and optimizers towards the base instance.
pub fn run_static(
    market: &Market,
    schedule: &PerturbationSchedule,
    opts: &SolveOptions,
) -> Result<StabilityReport> {
    let tree = market.tree();
    let base_primal = solve_primal(market, &schedule.spec, schedule.x, opts)?;
    let base_dual = solve_dual(market, &schedule.spec, schedule.y, opts)?;

    let mut rows = Vec::new();
    for n in 1..=schedule.steps {
        let (x_n, y_n, spec_n, theta_n) = schedule.row(n)?;
        let (tilt, tilted_tree) = tilt_measure(tree, &theta_n)?;
        let market_n = market.with_tree(tilted_tree)?;
        let primal_n = solve_primal(&market_n, &spec_n, x_n, opts)?;
        let dual_n = solve_dual(&market_n, &spec_n, y_n, opts)?;
        rows.push(StabilityRow {
            n,
            x_n,
            y_n,
            total_variation: tilt.total_variation,
            u_n: primal_n.value,
            v_n: dual_n.value,
            u_err: (primal_n.value - base_primal.value).abs(),
            v_err: (dual_n.value - base_dual.value).abs(),
            du_err: (primal_n.marginal_value - base_primal.marginal_value).abs(),
            dv_err: (dual_n.marginal_value - base_dual.marginal_value).abs(),
            primal_dist: l0_distance(tree, &primal_n.terminal_wealth, &base_primal.terminal_wealth),
            dual_dist: l0_distance(tree, &dual_n.terminal, &base_dual.terminal),
        });
    }

    let series: Vec<(&str, Vec<f64>)> = vec![
        ("u", rows.iter().map(|r| r.u_err).collect()),
        ("v", rows.iter().map(|r| r.v_err).collect()),
        ("du", rows.iter().map(|r| r.du_err).collect()),
        ("dv", rows.iter().map(|r| r.dv_err).collect()),
        ("primal_optimizer", rows.iter().map(|r| r.primal_dist).collect()),
        ("dual_optimizer", rows.iter().map(|r| r.dual_dist).collect()),
        ("tv", rows.iter().map(|r| r.total_variation).collect()),
    ];
    let fitted_rates = series
        .iter()
        .map(|(name, errs)| (name.to_string(), fitted_rate(errs)))
        .collect();

    let mut checks = Vec::new();
    if schedule.steps >= 10 {
        for (name, errs) in &series {
            if *name == "tv" {
                continue;
            }
            let first = errs[0];
            let last = *errs.last().expect("at least one row");
            let ratio = if first <= 1e-13 {
                if last <= 1e-13 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                last / first
            };
            checks.push(Check::new(format!("{name}_final_over_first"), ratio, 0.1));
        }
        // total variation halves per step within 10 percent
        let tv: Vec<f64> = rows.iter().map(|r| r.total_variation).collect();
        let mut worst = 0.0f64;
        for w in tv.windows(2) {
            if w[0] > 1e-13 {
                worst = worst.max((w[1] / w[0] - 0.5).abs());
            }
        }
        checks.push(Check::new("tv_halving_deviation", worst, 0.05));
    }
    let pass = all_pass(&checks);
    Ok(StabilityReport {
        base_u: base_primal.value,
        base_v: base_dual.value,
        base_du: base_primal.marginal_value,
        base_dv: base_dual.marginal_value,
        rows,
        fitted_rates,
        checks,
        pass,
    })
}

/// Uniform-integrability diagnostic: `sup_n E[Z~_n V_n^+(y Z^0_T / Z~_n)]`.
/// Finite state spaces make the family uniformly integrable automatically;
/// the diagnostic reports the magnitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UizReport {
    pub per_step: Vec<f64>,
    pub sup: f64,
}

pub fn uiz_diagnostic(
    market: &Market,
    schedule: &PerturbationSchedule,
    z0: &AdaptedProcess,
    y: f64,
) -> Result<UizReport> {
    if !(y > 0.0) {
        return Err(Error::Domain("y must be > 0".into()));
    }
    let tree = market.tree();
    if z0.len() != tree.len() {
        return Err(Error::Structural("process length mismatch".into()));
    }
    let mut per_step = Vec::new();
    for n in 1..=schedule.steps {
        let (_, _, spec_n, theta_n) = schedule.row(n)?;
        let (tilt, _) = tilt_measure(tree, &theta_n)?;
        let val: f64 = tree
            .leaves()
            .iter()
            .map(|&l| {
                let zn = tilt.density[l];
                tree.prob(l) * zn * spec_n.conjugate(y * z0[l] / zn).max(0.0)
            })
            .sum();
        per_step.push(val);
    }
    let sup = per_step.iter().copied().fold(0.0, f64::max);
    Ok(UizReport { per_step, sup })
}

/// One row of the dynamic stability experiment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DynamicRow {
    pub n: u32,
    /// `E[|Y~^{n,0}_T - h| ^ 1]` under the base measure.
    pub terminal_deviation: f64,
    /// Same distance for the running Cesaro average.
    pub cesaro_terminal_deviation: f64,
}

/// Dynamic stability report: measure-changed optimal dual processes, their
/// Cesaro averages and the limit candidate's optimality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicReport {
    pub rows: Vec<DynamicRow>,
    /// Max node-wise deviation between consecutive Cesaro averages at the
    /// end of the schedule.
    pub cesaro_cauchy_last: f64,
    /// Max node-wise deviation between the final and the mid-schedule
    /// Cesaro average.
    pub cesaro_cauchy_half: f64,
    /// Dual objective of the Cesaro limit candidate against `v(y)`.
    pub limit_objective_gap: f64,
    pub limit_is_deflator: bool,
    /// The Cesaro limit candidate, a supermartingale deflator under the
    /// base measure.
    pub limit: Deflator,
    /// Per-step measure-changed dual processes under the base measure.
    pub mapped: Vec<Deflator>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub fn run_dynamic(
    market: &Market,
    schedule: &PerturbationSchedule,
    opts: &SolveOptions,
) -> Result<DynamicReport> {
    if schedule.steps < 2 {
        return Err(Error::Precondition("dynamic stability needs >= 2 steps".into()));
    }
    let tree = market.tree();
    let base_dual = solve_dual(market, &schedule.spec, schedule.y, opts)?;
    let h_base = &base_dual.terminal;

    let mut mapped: Vec<Deflator> = Vec::new();
    let mut cesaro: Vec<Deflator> = Vec::new();
    let mut rows = Vec::new();
    let mut sum0 = AdaptedProcess::constant(tree, 0.0);
    let mut sum1 = AdaptedProcess::constant(tree, 0.0);
    for n in 1..=schedule.steps {
        let (_, y_n, spec_n, theta_n) = schedule.row(n)?;
        let (tilt, tilted_tree) = tilt_measure(tree, &theta_n)?;
        let market_n = market.with_tree(tilted_tree)?;
        let dual_n = solve_dual(&market_n, &spec_n, y_n, opts)?;
        // map the tilted-measure optimal dual process back under the base
        // measure: multiply by the density process
        let d_n = deflator_measure_change(
            &Deflator::from_price_system(&dual_n.price_system, y_n)?,
            &tilt,
            MeasureDirection::TiltedToBase,
        )?;
        sum0 = sum0.zip_with(&d_n.y0, |a, b| a + b);
        sum1 = sum1.zip_with(&d_n.y1, |a, b| a + b);
        let c_n = Deflator::new(
            sum0.map(|v| v / n as f64),
            sum1.map(|v| v / n as f64),
        )?;
        let dev = |d: &Deflator| -> f64 {
            let vals: Vec<f64> = tree.leaves().iter().map(|&l| d.y0[l]).collect();
            l0_distance(tree, &vals, h_base)
        };
        rows.push(DynamicRow {
            n,
            terminal_deviation: dev(&d_n),
            cesaro_terminal_deviation: dev(&c_n),
        });
        mapped.push(d_n);
        cesaro.push(c_n);
    }

    let last = cesaro.last().expect("steps >= 2").clone();
    let node_gap = |a: &Deflator, b: &Deflator| -> f64 {
        let mut worst = 0.0f64;
        for n in 0..tree.len() {
            worst = worst.max((a.y0[n] - b.y0[n]).abs());
            worst = worst.max((a.y1[n] - b.y1[n]).abs());
        }
        worst
    };
    let cauchy_last = node_gap(&last, &cesaro[cesaro.len() - 2]);
    let cauchy_half = node_gap(&last, &cesaro[cesaro.len() / 2]);

    // the limit candidate must itself be an optimal dual process: a deflator
    // whose terminal first component attains the dual value
    let limit_report = is_deflator(market, &last, 1e-8)?;
    let limit_objective: f64 = tree
        .leaves()
        .iter()
        .map(|&l| tree.prob(l) * schedule.spec.conjugate(last.y0[l]))
        .sum();
    let limit_gap = (limit_objective - base_dual.value).abs() / base_dual.value.abs().max(1.0);

    let first_dev = rows[0].terminal_deviation;
    let final_cesaro_dev = rows.last().expect("rows").cesaro_terminal_deviation;
    let dev_ratio = if first_dev <= 1e-13 {
        0.0
    } else {
        final_cesaro_dev / first_dev
    };
    let checks = vec![
        Check::new(
            "cesaro_limit_is_deflator",
            if limit_report.ok { 0.0 } else { 1.0 },
            0.0,
        ),
        Check::new("cesaro_limit_objective_gap", limit_gap, 1e-4),
        Check::new("cesaro_terminal_deviation_ratio", dev_ratio, 0.1),
    ];
    let pass = all_pass(&checks);
    Ok(DynamicReport {
        rows,
        cesaro_cauchy_last: cauchy_last,
        cesaro_cauchy_half: cauchy_half,
        limit_objective_gap: limit_gap,
        limit_is_deflator: limit_report.ok,
        limit: last,
        mapped,
        checks,
        pass,
    })
}

/// Shadow-price stability report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowStabilityReport {
    /// Max node-wise deviation of each step's shadow candidate from the
    /// Cesaro limit's one.
    pub shadow_deviation: Vec<f64>,
    /// Spread violations across all step shadows and the limit (must be 0).
    pub spread_violations: usize,
    pub verify: ShadowReport,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Extracts shadow candidates from the measure-changed dual processes and
/// verifies that the Cesaro limit's ratio is a shadow price of the limiting
/// problem.
pub fn shadow_stability(
    market: &Market,
    schedule: &PerturbationSchedule,
    opts: &SolveOptions,
) -> Result<ShadowStabilityReport> {
    let dynamic = run_dynamic(market, schedule, opts)?;
    let tree = market.tree();
    let ratio = |d: &Deflator| AdaptedProcess::from_fn(tree, |n| d.y1[n] / d.y0[n]);
    let limit_ratio = ratio(&dynamic.limit);
    let mut spread_violations = 0usize;
    let mut shadow_deviation = Vec::new();
    for d in &dynamic.mapped {
        let r = ratio(d);
        let mut worst = 0.0f64;
        for n in 0..tree.len() {
            worst = worst.max((r[n] - limit_ratio[n]).abs());
            if r[n] < market.bid(n) - 1e-9 || r[n] > market.ask(n) + 1e-9 {
                spread_violations += 1;
            }
        }
        shadow_deviation.push(worst);
    }
    for n in 0..tree.len() {
        if limit_ratio[n] < market.bid(n) - 1e-9 || limit_ratio[n] > market.ask(n) + 1e-9 {
            spread_violations += 1;
        }
    }
    let shadow = ShadowPrice::new(market, limit_ratio, schedule.y)?;
    let verify = verify_shadow(
        market,
        &schedule.spec,
        schedule.x,
        &shadow,
        1e-4,
        1e-2,
        opts,
    )?;
    let mut checks = vec![
        Check::new("shadow_spread_violations", spread_violations as f64, 0.0),
        Check::new(
            "limit_shadow_verifies",
            if verify.pass { 0.0 } else { 1.0 },
            0.0,
        ),
    ];
    checks.extend(verify.checks.iter().cloned());
    let pass = all_pass(&checks);
    Ok(ShadowStabilityReport {
        shadow_deviation,
        spread_violations,
        verify,
        checks,
        pass,
    })
}
