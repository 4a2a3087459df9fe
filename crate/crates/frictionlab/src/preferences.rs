//! Utility functions on the positive half-line with closed-form conjugates.
//!
//! Two families ship: logarithmic and constant relative risk aversion. Both
//! are strictly increasing, strictly concave, satisfy the Inada conditions
//! and have asymptotic elasticity below one analytically, so every duality
//! identity is exactly checkable. A normalized CRRA variant
//! `(x^(1-gamma) - 1) / (1 - gamma)` is included so that gamma -> 1
//! schedules converge pointwise to the logarithm.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GAMMA_GAP: f64 = 1e-9;

/// Utility family tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UtilityFamily {
    Log,
    Crra { gamma: f64 },
}

/// A utility function specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub family: UtilityFamily,
    /// For CRRA: subtract the constant `1 / (1 - gamma)` so the family is
    /// pointwise continuous in gamma across 1. Ignored for Log.
    pub normalized: bool,
}

/// Selector for [`UtilitySpec::evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UtilityMap {
    /// Utility `U`.
    U,
    /// Marginal utility `U'`.
    Marginal,
    /// Convex conjugate `V(y) = sup_x (U(x) - x y)`.
    V,
    /// Conjugate derivative `V' = -I`.
    ConjugateMarginal,
    /// Inverse marginal utility `I = (U')^{-1}`.
    InverseMarginal,
}

impl UtilitySpec {
    pub fn log() -> Self {
        Self {
            family: UtilityFamily::Log,
            normalized: false,
        }
    }

    pub fn crra(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!("CRRA gamma {} must be > 0", gamma)));
        }
        if (gamma - 1.0).abs() < GAMMA_GAP {
            return Err(Error::Domain(
                "CRRA gamma too close to 1; use the log family".into(),
            ));
        }
        Ok(Self {
            family: UtilityFamily::Crra { gamma },
            normalized: false,
        })
    }

    pub fn crra_normalized(gamma: f64) -> Result<Self> {
        let mut spec = Self::crra(gamma)?;
        spec.normalized = true;
        Ok(spec)
    }

    /// Utility `U(x)`, `x > 0` assumed.
    pub fn u(&self, x: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => x.ln(),
            UtilityFamily::Crra { gamma } => {
                if self.normalized {
                    // (x^(1-g) - 1) / (1-g), stable near g = 1
                    f64::exp_m1((1.0 - gamma) * x.ln()) / (1.0 - gamma)
                } else {
                    x.powf(1.0 - gamma) / (1.0 - gamma)
                }
            }
        }
    }

    /// Marginal utility `U'(x)`.
    pub fn marginal(&self, x: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => 1.0 / x,
            UtilityFamily::Crra { gamma } => x.powf(-gamma),
        }
    }

    /// Second derivative `U''(x)` (strictly negative).
    pub fn second(&self, x: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => -1.0 / (x * x),
            UtilityFamily::Crra { gamma } => -gamma * x.powf(-gamma - 1.0),
        }
    }

    /// Inverse marginal utility `I(y) = (U')^{-1}(y)`.
    pub fn inverse_marginal(&self, y: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => 1.0 / y,
            UtilityFamily::Crra { gamma } => y.powf(-1.0 / gamma),
        }
    }

    /// Convex conjugate `V(y) = sup_x (U(x) - x y)`.
    pub fn conjugate(&self, y: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => -y.ln() - 1.0,
            UtilityFamily::Crra { gamma } => {
                let a = (gamma - 1.0) / gamma;
                if self.normalized {
                    // g/(1-g) y^a - 1/(1-g) = g expm1(a ln y)/(1-g) - 1
                    gamma * f64::exp_m1(a * y.ln()) / (1.0 - gamma) - 1.0
                } else {
                    gamma / (1.0 - gamma) * y.powf(a)
                }
            }
        }
    }

    /// `V'(y) = -I(y)`.
    pub fn conjugate_marginal(&self, y: f64) -> f64 {
        -self.inverse_marginal(y)
    }

    /// `V''(y)` (strictly positive).
    pub fn conjugate_second(&self, y: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => 1.0 / (y * y),
            UtilityFamily::Crra { gamma } => y.powf(-1.0 / gamma - 1.0) / gamma,
        }
    }

    /// Closed-form evaluation with domain validation.
    pub fn evaluate(&self, which: UtilityMap, arg: f64) -> Result<f64> {
        if !(arg > 0.0) || !arg.is_finite() {
            return Err(Error::Domain(format!(
                "argument {} outside the positive half-line",
                arg
            )));
        }
        Ok(match which {
            UtilityMap::U => self.u(arg),
            UtilityMap::Marginal => self.marginal(arg),
            UtilityMap::V => self.conjugate(arg),
            UtilityMap::ConjugateMarginal => self.conjugate_marginal(arg),
            UtilityMap::InverseMarginal => self.inverse_marginal(arg),
        })
    }

    /// Asymptotic elasticity `limsup x U'(x) / U(x)`, analytic per family.
    pub fn asymptotic_elasticity(&self) -> f64 {
        match self.family {
            UtilityFamily::Log => 0.0,
            UtilityFamily::Crra { gamma } => 1.0 - gamma,
        }
    }

    /// Largest violation of the Fenchel-Young inequality
    /// `U(x) <= V(y) + x y` over the grid (non-positive when correct;
    /// zero is attained at `y = U'(x)`).
    pub fn fenchel_check(&self, xs: &[f64], ys: &[f64]) -> Result<f64> {
        if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("grids must be strictly positive".into()));
        }
        let mut worst = f64::NEG_INFINITY;
        for &x in xs {
            for &y in ys {
                worst = worst.max(self.u(x) - self.conjugate(y) - x * y);
            }
        }
        Ok(worst)
    }

    /// The n-th element of the declared perturbation schedule: gamma scaled
    /// by `1 + kappa 2^{-n}` for CRRA, and the normalized CRRA family with
    /// `gamma_n = 1 + kappa 2^{-n}` for the log base (which converges to the
    /// logarithm pointwise). The sequence converges geometrically.
    pub fn perturbed(&self, n: u32, kappa: f64) -> Result<UtilitySpec> {
        let factor = kappa * 0.5f64.powi(n as i32);
        if factor.abs() < GAMMA_GAP {
            return Ok(*self);
        }
        match self.family {
            UtilityFamily::Log => Self::crra_normalized(1.0 + factor),
            UtilityFamily::Crra { gamma } => {
                let mut spec = Self::crra(gamma * (1.0 + factor))?;
                spec.normalized = self.normalized;
                Ok(spec)
            }
        }
    }
}

impl fmt::Display for UtilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            UtilityFamily::Log => write!(f, "log"),
            UtilityFamily::Crra { gamma } => {
                if self.normalized {
                    write!(f, "crra-normalized:{}", gamma)
                } else {
                    write!(f, "crra:{}", gamma)
                }
            }
        }
    }
}

impl FromStr for UtilitySpec {
    type Err = Error;

    /// Parses `log`, `crra:<gamma>` or `crra-normalized:<gamma>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("log") {
            return Ok(Self::log());
        }
        let parse_gamma = |rest: &str| {
            rest.parse::<f64>()
                .map_err(|_| Error::Config(format!("cannot parse CRRA gamma from '{}'", rest)))
        };
        if let Some(rest) = s.strip_prefix("crra-normalized:") {
            return Self::crra_normalized(parse_gamma(rest)?);
        }
        if let Some(rest) = s.strip_prefix("crra:") {
            return Self::crra(parse_gamma(rest)?);
        }
        Err(Error::Config(format!(
            "unknown utility '{}'; expected log | crra:<gamma>",
            s
        )))
    }
}

/// Log-spaced grid on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<UtilitySpec> {
        vec![
            UtilitySpec::log(),
            UtilitySpec::crra(0.5).unwrap(),
            UtilitySpec::crra(2.0).unwrap(),
            UtilitySpec::crra(3.0).unwrap(),
            UtilitySpec::crra_normalized(1.002).unwrap(),
        ]
    }

    #[test]
    fn log_conjugate_at_one() {
        assert_eq!(UtilitySpec::log().conjugate(1.0), -1.0);
    }

    #[test]
    fn crra_marginal_value() {
        let spec = UtilitySpec::crra(2.0).unwrap();
        assert!((spec.marginal(2.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fenchel_equality_at_the_maximizer() {
        let grid = log_grid(0.05, 20.0, 40);
        for spec in specs() {
            for &x in &grid {
                let y = spec.marginal(x);
                let gap = spec.u(x) - spec.conjugate(y) - x * y;
                assert!(gap.abs() < 1e-12, "{spec}: gap {gap} at x = {x}");
            }
        }
    }

    #[test]
    fn fenchel_inequality_off_diagonal() {
        let spec = UtilitySpec::log();
        // U(1) - V(2) - 2 = 0 + ln 2 + 1 - 2 = ln 2 - 1 < 0
        let v = spec.u(1.0) - spec.conjugate(2.0) - 2.0;
        assert!((v - (2.0f64.ln() - 1.0)).abs() < 1e-15);
        assert!(v < 0.0);
    }

    #[test]
    fn fenchel_grid_sweep_non_positive() {
        let grid = log_grid(0.02, 50.0, 100);
        for spec in specs() {
            let worst = spec.fenchel_check(&grid, &grid).unwrap();
            assert!(worst <= 1e-12, "{spec}: worst violation {worst}");
        }
    }

    #[test]
    fn inverse_identities() {
        let grid = log_grid(0.1, 10.0, 25);
        for spec in specs() {
            for &x in &grid {
                let y = spec.marginal(x);
                assert!((spec.inverse_marginal(y) - x).abs() <= 1e-12 * x.max(1.0));
                assert!(
                    (spec.marginal(spec.inverse_marginal(x)) - x).abs() <= 1e-12 * x.max(1.0)
                );
                assert!(
                    (spec.conjugate_marginal(x) + spec.inverse_marginal(x)).abs()
                        <= 1e-12 * spec.inverse_marginal(x).abs()
                );
            }
        }
    }

    #[test]
    fn conjugate_is_convex_decreasing_on_grid() {
        let grid = log_grid(0.1, 10.0, 60);
        for spec in specs() {
            for w in grid.windows(3) {
                let (y0, y1, y2) = (w[0], w[1], w[2]);
                let (v0, v1, v2) = (spec.conjugate(y0), spec.conjugate(y1), spec.conjugate(y2));
                assert!(v1 < v0, "{spec}: V not decreasing at {y1}");
                // secant slopes increase for convex functions
                let s01 = (v1 - v0) / (y1 - y0);
                let s12 = (v2 - v1) / (y2 - y1);
                assert!(s12 >= s01 - 1e-10, "{spec}: V not convex near {y1}");
            }
        }
    }

    #[test]
    fn asymptotic_elasticity_below_one() {
        for spec in specs() {
            assert!(spec.asymptotic_elasticity() < 1.0);
        }
        assert_eq!(UtilitySpec::log().asymptotic_elasticity(), 0.0);
        assert_eq!(
            UtilitySpec::crra(3.0).unwrap().asymptotic_elasticity(),
            -2.0
        );
    }

    #[test]
    fn perturbed_schedule_parameters() {
        let base = UtilitySpec::crra(2.0).unwrap();
        let p0 = base.perturbed(0, 0.5).unwrap();
        assert_eq!(p0.family, UtilityFamily::Crra { gamma: 3.0 });
        // geometric decay of the gamma offset
        for n in 0..20 {
            let gn = match base.perturbed(n, 0.5).unwrap().family {
                UtilityFamily::Crra { gamma } => gamma,
                _ => unreachable!(),
            };
            let expected = 2.0 * (1.0 + 0.5 * 0.5f64.powi(n as i32));
            assert!((gn - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn perturbed_pointwise_gap_halves_per_step() {
        // sup over a compact of |U_n - U| should shrink by about half per step
        let grid = log_grid(0.1, 10.0, 200);
        for base in [UtilitySpec::crra(2.0).unwrap(), UtilitySpec::log()] {
            let sup_gap = |n: u32| -> f64 {
                let pn = base.perturbed(n, 0.5).unwrap();
                grid.iter()
                    .map(|&x| (pn.u(x) - base.u(x)).abs())
                    .fold(0.0, f64::max)
            };
            let gaps: Vec<f64> = (1..10).map(sup_gap).collect();
            for w in gaps.windows(2) {
                let ratio = w[1] / w[0];
                assert!(
                    (0.3..0.7).contains(&ratio),
                    "{base}: gap ratio {ratio} not near 1/2"
                );
            }
        }
    }

    #[test]
    fn conjugates_converge_with_the_family() {
        // pointwise convergence of U_n forces pointwise convergence of V_n
        let grid = log_grid(0.2, 5.0, 50);
        for base in [UtilitySpec::log(), UtilitySpec::crra(0.5).unwrap()] {
            let sup_gap = |n: u32| -> f64 {
                let pn = base.perturbed(n, 0.5).unwrap();
                grid.iter()
                    .map(|&y| (pn.conjugate(y) - base.conjugate(y)).abs())
                    .fold(0.0, f64::max)
            };
            let gaps: Vec<f64> = (1..16).map(sup_gap).collect();
            for w in gaps.windows(2) {
                assert!(w[1] < w[0], "{base}: conjugate gap not decreasing");
            }
            assert!(gaps.last().unwrap() < &1e-3, "{base}: gaps {gaps:?}");
        }
    }

    #[test]
    fn normalized_crra_tracks_log_near_one() {
        let spec = UtilitySpec::crra_normalized(1.0 + 1e-6).unwrap();
        for &x in &log_grid(0.1, 10.0, 20) {
            assert!((spec.u(x) - x.ln()).abs() < 1e-5);
            assert!((spec.conjugate(x) - (-x.ln() - 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn evaluate_rejects_non_positive() {
        let spec = UtilitySpec::log();
        assert!(spec.evaluate(UtilityMap::U, 0.0).is_err());
        assert!(spec.evaluate(UtilityMap::V, -1.0).is_err());
        assert!(spec.evaluate(UtilityMap::Marginal, f64::NAN).is_err());
    }

    #[test]
    fn parses_cli_forms() {
        assert_eq!("log".parse::<UtilitySpec>().unwrap(), UtilitySpec::log());
        assert_eq!(
            "crra:2.5".parse::<UtilitySpec>().unwrap(),
            UtilitySpec::crra(2.5).unwrap()
        );
        assert!("crra:1.0".parse::<UtilitySpec>().is_err());
        assert!("quadratic".parse::<UtilitySpec>().is_err());
    }
}
