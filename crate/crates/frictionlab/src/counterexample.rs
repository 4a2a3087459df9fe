//! Monte-Carlo reconstruction of the two-optimal-dual-processes
//! counterexample: a stopped geometric random walk whose inverse is a
//! martingale, a potential split of the inverse, a coin-flip perturbation of
//! the potential after its first unit crossing, and a frictional market in
//! which both the original and the perturbed inverse processes act as dual
//! optimizers and induce distinct shadow prices.
//!
//! The driving walk lives on a logarithmic lattice whose step divides the
//! upper barrier exactly, so upper absorption hits `2 (1 - lambda)` to
//! machine precision. Paths are independent with per-path seeded
//! substreams; every stage replays the walks deterministically, so memory
//! stays flat in the path count and results do not depend on the degree of
//! parallelism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{all_pass, Check};

/// Configuration of the counterexample simulation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CxConfig {
    /// Transaction cost level, in (0, 1/2).
    pub lambda: f64,
    /// Perturbation half-width of the coin, with `(1-lambda)(1+delta) < 1-delta`.
    pub delta: f64,
    /// Lattice steps into which the log upper barrier is divided.
    pub grid_steps: u32,
    /// Hard cap on the number of steps per path.
    pub depth_cap: u64,
    /// Lower absorbing level for the walk.
    pub eps_low: f64,
    pub paths: u64,
    pub seed: u64,
}

impl Default for CxConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            delta: 0.05,
            grid_steps: 40,
            depth_cap: 200_000,
            eps_low: 1e-3,
            paths: 100_000,
            seed: 7,
        }
    }
}

impl CxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 0.5) {
            return Err(Error::Config(format!(
                "lambda {} outside (0, 1/2)",
                self.lambda
            )));
        }
        if !(self.delta >= 0.0)
            || (1.0 - self.lambda) * (1.0 + self.delta) >= 1.0 - self.delta
        {
            return Err(Error::Config(format!(
                "need (1-lambda)(1+delta) < 1-delta, got {} vs {}",
                (1.0 - self.lambda) * (1.0 + self.delta),
                1.0 - self.delta
            )));
        }
        let upper = 2.0 * (1.0 - self.lambda);
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) || self.eps_low >= upper / (upper + 1.0) {
            return Err(Error::Config(format!(
                "eps_low {} must lie in (0, {}) below the sigma level",
                self.eps_low,
                upper / (upper + 1.0)
            )));
        }
        if self.grid_steps == 0 || self.paths == 0 || self.depth_cap == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        Ok(())
    }
}

/// Where a path was absorbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Absorption {
    /// The walk reached the upper barrier `2 (1 - lambda)` exactly.
    Upper,
    /// The walk fell to or below `eps_low`.
    Lower,
    /// The depth cap interrupted the walk; treated as lower absorption at
    /// the current level.
    Cap,
}

/// Lattice quantities derived from the configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Lattice {
    /// Log-lattice step `ln(2(1-lambda)) / grid_steps`.
    pub h: f64,
    /// Up-step probability making `1/N` a one-step martingale:
    /// `p = (e^h - 1) / (e^h - e^{-h})`.
    pub p_up: f64,
    /// Constant martingale part `1 / (2 (1 - lambda))`.
    pub m_hat: f64,
    /// Upper barrier lattice index (`grid_steps`).
    pub k_upper: i64,
    /// Lattice index at or below which the walk is lower-absorbed.
    pub k_low: i64,
    /// Sigma level: the potential first reaches one when the walk drops to
    /// this index. The continuum threshold is rounded to the nearest
    /// lattice level so the crossing probability matches the continuous
    /// statement to O(h^2) rather than the O(h) overshoot bias.
    pub k_sigma: i64,
}

impl Lattice {
    fn new(config: &CxConfig) -> Self {
        let upper = 2.0 * (1.0 - config.lambda);
        let h = upper.ln() / config.grid_steps as f64;
        let p_up = (h.exp() - 1.0) / (h.exp() - (-h).exp());
        let m_hat = 1.0 / upper;
        let k_low = (config.eps_low.ln() / h).floor() as i64;
        let k_sigma = (-(1.0 + m_hat).ln() / h).round() as i64;
        Self {
            h,
            p_up,
            m_hat,
            k_upper: config.grid_steps as i64,
            k_low,
            k_sigma,
        }
    }

    fn n_at(&self, k: i64) -> f64 {
        (k as f64 * self.h).exp()
    }
}

/// Per-path summary filled in stage by stage.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathRecord {
    pub steps: u64,
    pub absorption: Absorption,
    /// Lattice index at absorption.
    pub k_abs: i64,
    /// Terminal value of `Z^hat = 1/S^hat`.
    pub z_hat_terminal: f64,
    /// First step at which the potential reaches one, if any (stage 2).
    pub sigma_step: Option<u64>,
    /// Coin value `1 +- delta` drawn at sigma (stage 3; NaN without sigma).
    pub coin: f64,
    /// Terminal value of the perturbed `Z^check` (stage 3).
    pub z_check_terminal: f64,
    /// Whether `sup_t |Z^hat - Z^check| > 0` (stage 3).
    pub deviates: bool,
}

/// Accumulated mean and standard error of a Monte-Carlo statistic.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McStat {
    pub mean: f64,
    pub std_error: f64,
    pub samples: u64,
}

fn mc_stat(sum: f64, sumsq: f64, n: u64) -> McStat {
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    McStat {
        mean,
        std_error: (var / n as f64).sqrt(),
        samples: n,
    }
}

/// Stopped-process diagnostics at fixed absolute steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointStat {
    pub step: u64,
    pub stat: McStat,
}

const CHECKPOINTS: [u64; 6] = [1, 4, 16, 64, 256, 1024];

/// Seeded Monte-Carlo path set for the counterexample constructions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub config: CxConfig,
    pub lattice: Lattice,
    pub records: Vec<PathRecord>,
    /// Stopped `1/S^hat` means per checkpoint (must be 1 within noise).
    pub hat_checkpoints: Vec<CheckpointStat>,
    /// Stopped `Z^check` means per checkpoint (stage 3).
    pub check_checkpoints: Vec<CheckpointStat>,
    /// Largest `|P^hat|` at upper absorption (stage 2; exactly 0 up to
    /// rounding).
    pub p_hat_at_upper_absorption: f64,
    /// Ratio-bound violations of `S^check / S^hat` (stage 3).
    pub ratio_violations: u64,
    /// Spread-containment violations of `S^hat`, `S^check` in
    /// `[(1-lambda) S, S]` (stage 4).
    pub spread_violations: u64,
    /// Violations of `m_t < M_t` (stage 4).
    pub band_violations: u64,
    /// Largest `|S_0 - 1|` (stage 4).
    pub s0_deviation: f64,
    /// Largest `|S_T - 2|` over upper-absorbed paths (stage 4).
    pub s1_deviation: f64,
    stage: u8,
}

fn path_rng(seed: u64, idx: u64, stream: u64) -> ChaCha12Rng {
    // splitmix-style mixing keeps per-path substreams independent of the
    // path count and the parallel schedule
    let mut z = seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15) ^ idx.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    ChaCha12Rng::seed_from_u64(z)
}

/// Replays the lattice walk of one path, invoking `on_state(t, k)` for every
/// visited state including the initial `(0, 0)` and the absorbing one.
fn replay(
    config: &CxConfig,
    lattice: &Lattice,
    idx: u64,
    mut on_state: impl FnMut(u64, i64),
) -> (u64, Absorption, i64) {
    let mut rng = path_rng(config.seed, idx, 1);
    let mut k: i64 = 0;
    let mut t: u64 = 0;
    on_state(0, 0);
    loop {
        if k >= lattice.k_upper {
            return (t, Absorption::Upper, k);
        }
        if k <= lattice.k_low {
            return (t, Absorption::Lower, k);
        }
        if t >= config.depth_cap {
            return (t, Absorption::Cap, k);
        }
        k += if rng.gen::<f64>() < lattice.p_up { 1 } else { -1 };
        t += 1;
        on_state(t, k);
    }
}

/// Stage 1: simulate the stopped geometric walk `S^hat` and its martingale
/// inverse.
pub fn simulate_hat(config: &CxConfig) -> Result<PathEnsemble> {
    config.validate()?;
    let lattice = Lattice::new(config);
    if !(lattice.p_up > 0.0 && lattice.p_up < 1.0) {
        return Err(Error::Config("up probability left (0, 1)".into()));
    }
    let per_path: Vec<(PathRecord, [f64; CHECKPOINTS.len()])> = (0..config.paths)
        .into_par_iter()
        .map(|idx| {
            let mut cp_vals = [f64::NAN; CHECKPOINTS.len()];
            let (steps, absorption, k_abs) = replay(config, &lattice, idx, |t, k| {
                let inv = (-(k as f64) * lattice.h).exp();
                for (i, &cp) in CHECKPOINTS.iter().enumerate() {
                    if t <= cp {
                        cp_vals[i] = inv;
                    }
                }
            });
            let record = PathRecord {
                steps,
                absorption,
                k_abs,
                z_hat_terminal: (-(k_abs as f64) * lattice.h).exp(),
                sigma_step: None,
                coin: f64::NAN,
                z_check_terminal: f64::NAN,
                deviates: false,
            };
            (record, cp_vals)
        })
        .collect();
    let mut cp_sum = [0.0f64; CHECKPOINTS.len()];
    let mut cp_sumsq = [0.0f64; CHECKPOINTS.len()];
    let mut records = Vec::with_capacity(per_path.len());
    for (record, cp_vals) in per_path {
        for (i, &v) in cp_vals.iter().enumerate() {
            cp_sum[i] += v;
            cp_sumsq[i] += v * v;
        }
        records.push(record);
    }
    let hat_checkpoints = CHECKPOINTS
        .iter()
        .enumerate()
        .map(|(i, &step)| CheckpointStat {
            step,
            stat: mc_stat(cp_sum[i], cp_sumsq[i], config.paths),
        })
        .collect();
    Ok(PathEnsemble {
        config: *config,
        lattice,
        records,
        hat_checkpoints,
        check_checkpoints: Vec::new(),
        p_hat_at_upper_absorption: 0.0,
        ratio_violations: 0,
        spread_violations: 0,
        band_violations: 0,
        s0_deviation: 0.0,
        s1_deviation: 0.0,
        stage: 1,
    })
}

/// Stage 2: split `Z^hat = M^hat + P^hat` into the constant martingale part
/// and the potential, and locate the first step at which the potential
/// reaches one.
pub fn decompose_potential(ensemble: &mut PathEnsemble) -> Result<()> {
    if ensemble.stage < 1 {
        return Err(Error::Precondition("simulate_hat must run first".into()));
    }
    let config = ensemble.config;
    let lattice = ensemble.lattice;
    let updates: Vec<(Option<u64>, f64)> = (0..config.paths)
        .into_par_iter()
        .map(|idx| {
            let mut sigma: Option<u64> = None;
            let (_, absorption, k_abs) = replay(&config, &lattice, idx, |t, k| {
                if sigma.is_none() && k <= lattice.k_sigma {
                    sigma = Some(t);
                }
            });
            let p_hat_abs = if absorption == Absorption::Upper {
                ((-(k_abs as f64) * lattice.h).exp() - lattice.m_hat).abs()
            } else {
                0.0
            };
            (sigma, p_hat_abs)
        })
        .collect();
    let mut worst = 0.0f64;
    for (record, (sigma, p_abs)) in ensemble.records.iter_mut().zip(updates) {
        record.sigma_step = sigma;
        worst = worst.max(p_abs);
    }
    ensemble.p_hat_at_upper_absorption = worst;
    ensemble.stage = 2;
    Ok(())
}

/// Stage 3: draw the coin `f = 1 +- delta` at sigma, build the perturbed
/// potential `P^check = P^hat` before sigma and `f P^hat` after, and with it
/// `Z^check = M^hat + P^check` and `S^check = 1 / Z^check`.
pub fn perturb(ensemble: &mut PathEnsemble) -> Result<()> {
    if ensemble.stage < 2 {
        return Err(Error::Precondition("decompose_potential must run first".into()));
    }
    let config = ensemble.config;
    let lattice = ensemble.lattice;
    let sigma_steps: Vec<Option<u64>> =
        ensemble.records.iter().map(|r| r.sigma_step).collect();
    struct Out {
        coin: f64,
        z_check_terminal: f64,
        deviates: bool,
        ratio_violations: u64,
        cp_vals: [f64; CHECKPOINTS.len()],
    }
    let outs: Vec<Out> = (0..config.paths)
        .into_par_iter()
        .map(|idx| {
            let sigma = sigma_steps[idx as usize];
            let coin = match sigma {
                None => f64::NAN,
                Some(_) => {
                    let mut rng = path_rng(config.seed, idx, 2);
                    if rng.gen::<bool>() {
                        1.0 + config.delta
                    } else {
                        1.0 - config.delta
                    }
                }
            };
            let (lo_ratio, hi_ratio) = (1.0 / (1.0 + config.delta), 1.0 / (1.0 - config.delta));
            let mut out = Out {
                coin,
                z_check_terminal: f64::NAN,
                deviates: false,
                ratio_violations: 0,
                cp_vals: [f64::NAN; CHECKPOINTS.len()],
            };
            replay(&config, &lattice, idx, |t, k| {
                let z_hat = (-(k as f64) * lattice.h).exp();
                let p_hat = z_hat - lattice.m_hat;
                let p_check = match sigma {
                    Some(s) if t >= s => coin * p_hat,
                    _ => p_hat,
                };
                let z_check = lattice.m_hat + p_check;
                out.z_check_terminal = z_check;
                // |Z^hat - Z^check| = |P^hat - P^check| exactly, with no
                // reconstruction rounding
                if (p_hat - p_check).abs() > 0.0 {
                    out.deviates = true;
                }
                // S^check / S^hat = Z^hat / Z^check must stay within
                // [(1+delta)^-1, (1-delta)^-1]
                let ratio = z_check / z_hat; // = S^hat / S^check inverted below
                let s_ratio = 1.0 / ratio;
                if s_ratio < lo_ratio * (1.0 - 1e-12) || s_ratio > hi_ratio * (1.0 + 1e-12) {
                    out.ratio_violations += 1;
                }
                for (i, &cp) in CHECKPOINTS.iter().enumerate() {
                    if t <= cp {
                        out.cp_vals[i] = z_check;
                    }
                }
            });
            out
        })
        .collect();
    let mut cp_sum = [0.0f64; CHECKPOINTS.len()];
    let mut cp_sumsq = [0.0f64; CHECKPOINTS.len()];
    let mut ratio_violations = 0u64;
    for (record, out) in ensemble.records.iter_mut().zip(&outs) {
        record.coin = out.coin;
        record.z_check_terminal = out.z_check_terminal;
        record.deviates = out.deviates;
        ratio_violations += out.ratio_violations;
        for i in 0..CHECKPOINTS.len() {
            cp_sum[i] += out.cp_vals[i];
            cp_sumsq[i] += out.cp_vals[i] * out.cp_vals[i];
        }
    }
    ensemble.ratio_violations = ratio_violations;
    ensemble.check_checkpoints = CHECKPOINTS
        .iter()
        .enumerate()
        .map(|(i, &step)| CheckpointStat {
            step,
            stat: mc_stat(cp_sum[i], cp_sumsq[i], config.paths),
        })
        .collect();
    ensemble.stage = 3;
    Ok(())
}

/// Stage 4: build the frictional market `S_t = (1 - t) m_t + t M_t` with
/// `m = max(S^hat, S^check)` and `M = (1-lambda)^{-1} min(S^hat, S^check)`
/// on the normalized clock, and verify band ordering, endpoints and spread
/// containment.
pub fn build_market(ensemble: &mut PathEnsemble) -> Result<()> {
    if ensemble.stage < 3 {
        return Err(Error::Precondition("perturb must run first".into()));
    }
    let config = ensemble.config;
    let lattice = ensemble.lattice;
    let per_path: Vec<(u64, u64, f64, f64, f64)> = ensemble
        .records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let idx = i as u64;
            let sigma = record.sigma_step;
            let coin = record.coin;
            let total = record.steps.max(1);
            let mut spread_violations = 0u64;
            let mut band_violations = 0u64;
            let mut s0_dev = 0.0f64;
            let mut s_terminal = f64::NAN;
            replay(&config, &lattice, idx, |t, k| {
                let s_hat = lattice.n_at(k);
                let z_hat = 1.0 / s_hat;
                let p_hat = z_hat - lattice.m_hat;
                let p_check = match sigma {
                    Some(s) if t >= s => coin * p_hat,
                    _ => p_hat,
                };
                let s_check = 1.0 / (lattice.m_hat + p_check);
                let m_small = s_hat.max(s_check);
                let m_big = s_hat.min(s_check) / (1.0 - config.lambda);
                if m_small >= m_big {
                    band_violations += 1;
                }
                let clock = t as f64 / total as f64;
                let s = (1.0 - clock) * m_small + clock * m_big;
                if t == 0 {
                    s0_dev = (s - 1.0).abs();
                }
                s_terminal = s;
                let (bid, ask) = ((1.0 - config.lambda) * s, s);
                for v in [s_hat, s_check] {
                    if v < bid * (1.0 - 1e-12) || v > ask * (1.0 + 1e-12) {
                        spread_violations += 1;
                    }
                }
            });
            let s1_dev = if record.absorption == Absorption::Upper {
                (s_terminal - 2.0).abs()
            } else {
                0.0
            };
            (spread_violations, band_violations, s0_dev, s1_dev, s_terminal)
        })
        .collect();
    let mut spread = 0u64;
    let mut band = 0u64;
    let mut s0 = 0.0f64;
    let mut s1 = 0.0f64;
    for &(sv, bv, s0d, s1d, _) in &per_path {
        spread += sv;
        band += bv;
        s0 = s0.max(s0d);
        s1 = s1.max(s1d);
    }
    ensemble.spread_violations = spread;
    ensemble.band_violations = band;
    ensemble.s0_deviation = s0;
    ensemble.s1_deviation = s1;
    ensemble.stage = 4;
    Ok(())
}

/// Final report of the counterexample run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CxReport {
    pub config: CxConfig,
    pub lattice: Lattice,
    /// Deterministic potential start `(1 - 2 lambda) / (2 (1 - lambda))`.
    pub p_hat_zero: f64,
    /// Monte-Carlo estimate of `P[sigma < infinity]`.
    pub sigma_prob: McStat,
    /// Fraction of paths on which the two dual candidates differ somewhere.
    pub deviation_fraction: f64,
    /// Fractions by absorption side.
    pub upper_fraction: f64,
    pub lower_fraction: f64,
    pub cap_fraction: f64,
    /// Largest deviation of the terminal dual candidates from
    /// `1/(2(1-lambda))` over upper-absorbed paths.
    pub h_dual_deviation: f64,
    /// Largest relative residual of the log first-order condition
    /// `U'(g) = y Z_T` for buy-hold-sell on upper-absorbed paths.
    pub foc_residual: f64,
    /// Conditional mean of the buy-hold-sell log utility on upper paths and
    /// its theoretical value `ln x + ln 2(1-lambda)`.
    pub bhs_log_utility: f64,
    pub bhs_log_utility_theory: f64,
    pub s0_deviation: f64,
    pub s1_deviation: f64,
    pub spread_violations: u64,
    pub ratio_violations: u64,
    pub band_violations: u64,
    pub hat_checkpoints: Vec<CheckpointStat>,
    pub check_checkpoints: Vec<CheckpointStat>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Stage 5: aggregate the non-uniqueness evidence: both candidates attain
/// the same terminal dual optimizer exactly on upper-absorbed paths, the
/// log first-order condition holds for buy-hold-sell, and the candidates
/// differ exactly on the sigma event.
pub fn verify_nonuniqueness(ensemble: &PathEnsemble, x: f64) -> Result<CxReport> {
    if ensemble.stage < 4 {
        return Err(Error::Precondition("build_market must run first".into()));
    }
    if !(x > 0.0) {
        return Err(Error::Domain("initial endowment must be > 0".into()));
    }
    let config = &ensemble.config;
    let lattice = &ensemble.lattice;
    let n = config.paths as f64;
    let lambda = config.lambda;
    let upper_level = 2.0 * (1.0 - lambda);
    let p_hat_zero = (1.0 - 2.0 * lambda) / (2.0 * (1.0 - lambda));

    let mut sigma_count = 0u64;
    let mut deviation_count = 0u64;
    let (mut upper, mut lower, mut cap) = (0u64, 0u64, 0u64);
    let mut h_dev = 0.0f64;
    let mut foc_res = 0.0f64;
    let mut bhs_sum = 0.0f64;
    let y = 1.0 / x;
    let g_bhs = upper_level * x;
    let marginal = 1.0 / g_bhs;
    for r in &ensemble.records {
        if r.sigma_step.is_some() {
            sigma_count += 1;
        }
        if r.deviates {
            deviation_count += 1;
        }
        match r.absorption {
            Absorption::Upper => {
                upper += 1;
                h_dev = h_dev.max((r.z_hat_terminal - lattice.m_hat).abs());
                h_dev = h_dev.max((r.z_check_terminal - lattice.m_hat).abs());
                foc_res = foc_res.max((marginal - y * r.z_hat_terminal).abs() / marginal);
                foc_res = foc_res.max((marginal - y * r.z_check_terminal).abs() / marginal);
                // buy x shares at S_0 = 1, sell at the bid (1-lambda) S_T = (1-lambda) 2
                bhs_sum += (x * upper_level).ln();
            }
            Absorption::Lower => lower += 1,
            Absorption::Cap => cap += 1,
        }
    }
    let sigma_prob = {
        let p = sigma_count as f64 / n;
        McStat {
            mean: p,
            std_error: (p * (1.0 - p) / n).sqrt(),
            samples: config.paths,
        }
    };
    let deviation_fraction = deviation_count as f64 / n;
    let bhs_mean = if upper > 0 { bhs_sum / upper as f64 } else { f64::NAN };
    let bhs_theory = x.ln() + upper_level.ln();

    let three_se = 3.0 * sigma_prob.std_error;
    let mut checks = vec![
        Check::new(
            "p_hat_zero_formula",
            ((1.0 - lattice.m_hat) - p_hat_zero).abs(),
            1e-14,
        ),
        Check::new(
            "sigma_prob_within_3se",
            (sigma_prob.mean - p_hat_zero).abs(),
            three_se,
        ),
        Check::new("h_dual_exact_on_upper", h_dev, 1e-12),
        Check::new("log_foc_buy_hold_sell", foc_res, 1e-12),
        Check::new("s0_is_one", ensemble.s0_deviation, 1e-12),
        Check::new("s1_is_two_on_upper", ensemble.s1_deviation, 1e-12),
        Check::new("spread_violations", ensemble.spread_violations as f64, 0.0),
        Check::new("ratio_violations", ensemble.ratio_violations as f64, 0.0),
        Check::new("band_violations", ensemble.band_violations as f64, 0.0),
        Check::new(
            "deviation_matches_sigma_within_3se",
            (deviation_fraction - sigma_prob.mean).abs(),
            three_se.max(1e-12),
        ),
        Check::new(
            "lower_and_cap_mass",
            (lower + cap) as f64 / n,
            2e-2,
        ),
        Check::new(
            "bhs_log_utility_exact_on_upper",
            (bhs_mean - bhs_theory).abs(),
            1e-12,
        ),
        Check::new(
            "p_hat_vanishes_at_upper_absorption",
            ensemble.p_hat_at_upper_absorption,
            1e-12,
        ),
    ];
    for cps in [&ensemble.hat_checkpoints, &ensemble.check_checkpoints] {
        for cp in cps.iter() {
            checks.push(Check::new(
                format!("stopped_martingale_mean_step_{}", cp.step),
                (cp.stat.mean - 1.0).abs(),
                (3.0 * cp.stat.std_error).max(1e-12),
            ));
        }
    }
    if cap as f64 / n > 1e-3 {
        checks.push(Check::new("depth_cap_mass_warning", cap as f64 / n, 1e-3));
    }
    let pass = all_pass(&checks);
    Ok(CxReport {
        config: *config,
        lattice: *lattice,
        p_hat_zero,
        sigma_prob,
        deviation_fraction,
        upper_fraction: upper as f64 / n,
        lower_fraction: lower as f64 / n,
        cap_fraction: cap as f64 / n,
        h_dual_deviation: h_dev,
        foc_residual: foc_res,
        bhs_log_utility: bhs_mean,
        bhs_log_utility_theory: bhs_theory,
        s0_deviation: ensemble.s0_deviation,
        s1_deviation: ensemble.s1_deviation,
        spread_violations: ensemble.spread_violations,
        ratio_violations: ensemble.ratio_violations,
        band_violations: ensemble.band_violations,
        hat_checkpoints: ensemble.hat_checkpoints.clone(),
        check_checkpoints: ensemble.check_checkpoints.clone(),
        checks,
        pass,
    })
}

/// Runs all five stages.
pub fn run_counterexample(config: &CxConfig, x: f64) -> Result<(PathEnsemble, CxReport)> {
    let mut ensemble = simulate_hat(config)?;
    decompose_potential(&mut ensemble)?;
    perturb(&mut ensemble)?;
    build_market(&mut ensemble)?;
    let report = verify_nonuniqueness(&ensemble, x)?;
    Ok((ensemble, report))
}

/// One row of the optional path dump.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathDumpRow {
    pub path: u64,
    pub step: u64,
    pub clock: f64,
    pub s_hat: f64,
    pub z_hat: f64,
    pub p_hat: f64,
    pub p_check: f64,
    pub z_check: f64,
    pub s_check: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub price: f64,
}

/// Regenerates full per-step processes for the first `max_paths` paths.
pub fn dump_paths(ensemble: &PathEnsemble, max_paths: u64) -> Vec<PathDumpRow> {
    let config = &ensemble.config;
    let lattice = &ensemble.lattice;
    let mut rows = Vec::new();
    for idx in 0..max_paths.min(config.paths) {
        let record = &ensemble.records[idx as usize];
        let total = record.steps.max(1);
        replay(config, lattice, idx, |t, k| {
            let s_hat = lattice.n_at(k);
            let z_hat = 1.0 / s_hat;
            let p_hat = z_hat - lattice.m_hat;
            let p_check = match record.sigma_step {
                Some(s) if t >= s => record.coin * p_hat,
                _ => p_hat,
            };
            let z_check = lattice.m_hat + p_check;
            let s_check = 1.0 / z_check;
            let band_low = s_hat.max(s_check);
            let band_high = s_hat.min(s_check) / (1.0 - config.lambda);
            let clock = t as f64 / total as f64;
            rows.push(PathDumpRow {
                path: idx,
                step: t,
                clock,
                s_hat,
                z_hat,
                p_hat,
                p_check,
                z_check,
                s_check,
                band_low,
                band_high,
                price: (1.0 - clock) * band_low + clock * band_high,
            });
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CxConfig {
        CxConfig {
            paths: 20_000,
            seed: 11,
            ..CxConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(CxConfig::default().validate().is_ok());
        assert!(CxConfig { lambda: 0.6, ..CxConfig::default() }.validate().is_err());
        // delta too large for the band ordering
        assert!(CxConfig { delta: 0.2, ..CxConfig::default() }.validate().is_err());
        assert!(CxConfig { eps_low: 0.9, ..CxConfig::default() }.validate().is_err());
    }

    #[test]
    fn up_probability_is_the_martingale_one() {
        let lattice = Lattice::new(&CxConfig::default());
        let (h, p) = (lattice.h, lattice.p_up);
        // one-step martingale condition for 1/N
        assert!((p * (-h).exp() + (1.0 - p) * h.exp() - 1.0).abs() < 1e-15);
        assert!((p - (h.exp() - 1.0) / (h.exp() - (-h).exp())).abs() < 1e-15);
    }

    #[test]
    fn upper_barrier_is_exact_on_the_lattice() {
        let config = small_config();
        let lattice = Lattice::new(&config);
        let upper = lattice.n_at(lattice.k_upper);
        assert!((upper - 2.0 * (1.0 - config.lambda)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_across_runs_and_stages() {
        let config = CxConfig { paths: 2_000, ..small_config() };
        let (_, r1) = run_counterexample(&config, 1.0).unwrap();
        let (_, r2) = run_counterexample(&config, 1.0).unwrap();
        assert_eq!(r1.sigma_prob.mean, r2.sigma_prob.mean);
        assert_eq!(r1.deviation_fraction, r2.deviation_fraction);
        assert_eq!(r1.upper_fraction, r2.upper_fraction);
    }

    #[test]
    fn small_run_reproduces_the_constants() {
        let config = small_config();
        let (_, report) = run_counterexample(&config, 1.0).unwrap();
        assert!((report.p_hat_zero - 4.0 / 9.0).abs() < 1e-15);
        assert!(report.pass, "{:#?}", report.checks);
        // h = 1/(2(1-lambda)) = 0.5556 on upper paths, exactly
        assert!(report.h_dual_deviation < 1e-12);
        assert!((report.lattice.m_hat - 1.0 / 1.8).abs() < 1e-15);
    }

    #[test]
    fn degenerate_delta_gives_no_deviation() {
        // delta = 0 collapses the coin to 1: Z^check = Z^hat everywhere
        let config = CxConfig {
            delta: 0.0,
            paths: 5_000,
            ..small_config()
        };
        let mut ensemble = simulate_hat(&config).unwrap();
        decompose_potential(&mut ensemble).unwrap();
        perturb(&mut ensemble).unwrap();
        assert!(ensemble.records.iter().all(|r| !r.deviates));
        assert!(ensemble
            .records
            .iter()
            .filter(|r| r.sigma_step.is_some())
            .all(|r| r.coin == 1.0));
    }

    #[test]
    fn stages_enforce_order() {
        let config = CxConfig { paths: 100, ..small_config() };
        let mut ensemble = simulate_hat(&config).unwrap();
        assert!(perturb(&mut ensemble).is_err());
        decompose_potential(&mut ensemble).unwrap();
        assert!(build_market(&mut ensemble).is_err());
        assert!(verify_nonuniqueness(&ensemble, 1.0).is_err());
    }

    #[test]
    fn path_dump_is_consistent_with_records() {
        let config = CxConfig { paths: 50, ..small_config() };
        let (ensemble, _) = run_counterexample(&config, 1.0).unwrap();
        let rows = dump_paths(&ensemble, 3);
        // every dumped path starts at S = 1 and Z^hat = 1
        for idx in 0..3u64 {
            let first = rows.iter().find(|r| r.path == idx && r.step == 0).unwrap();
            assert_eq!(first.s_hat, 1.0);
            assert_eq!(first.z_hat, 1.0);
            assert!((first.price - 1.0).abs() < 1e-15);
            let record = &ensemble.records[idx as usize];
            let last = rows
                .iter()
                .filter(|r| r.path == idx)
                .max_by_key(|r| r.step)
                .unwrap();
            assert_eq!(last.step, record.steps);
            assert!((last.z_hat - record.z_hat_terminal).abs() < 1e-15);
        }
    }
}
