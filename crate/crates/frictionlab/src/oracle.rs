//! Closed-form benchmarks used by the verification suites.
//!
//! These are independent of every solver code path: plain formulas for the
//! one-period frictionless optimum.

use crate::error::{Error, Result};
use crate::preferences::{UtilityFamily, UtilitySpec};

/// Optimal one-period frictionless value for log or CRRA utility.
///
/// The market has gross returns `u = s_up / s0` and `d = s_dn / s0` with
/// `d < 1 < u` (otherwise the problem is degenerate or admits arbitrage).
/// The optimal stock fraction solves the first-order condition
/// `p (u-1) U'(w_up) = (1-p) (1-d) U'(w_dn)`, which for constant relative
/// risk aversion `gamma` (log is `gamma = 1`) gives
/// `pi = (k - 1) / ((u-1) + k (1-d))` with `k = ((1-p)(1-d) / (p(u-1)))^{-1/gamma}`.
pub fn merton_one_period_value(
    spec: &UtilitySpec,
    s0: f64,
    s_up: f64,
    s_dn: f64,
    p_up: f64,
    x: f64,
) -> Result<f64> {
    let (u, d) = (s_up / s0, s_dn / s0);
    if !(d < 1.0 && 1.0 < u) {
        return Err(Error::Precondition(format!(
            "one-period returns must straddle 1, got d = {}, u = {}",
            d, u
        )));
    }
    if !(p_up > 0.0 && p_up < 1.0 && x > 0.0) {
        return Err(Error::Precondition("need 0 < p < 1 and x > 0".into()));
    }
    let gamma = match spec.family {
        UtilityFamily::Log => 1.0,
        UtilityFamily::Crra { gamma } => gamma,
    };
    let ratio = ((1.0 - p_up) * (1.0 - d)) / (p_up * (u - 1.0));
    let k = ratio.powf(-1.0 / gamma);
    let pi = (k - 1.0) / ((u - 1.0) + k * (1.0 - d));
    let w_up = x * (1.0 + pi * (u - 1.0));
    let w_dn = x * (1.0 + pi * (d - 1.0));
    if !(w_up > 0.0 && w_dn > 0.0) {
        return Err(Error::Numeric("analytic optimum left the domain".into()));
    }
    Ok(p_up * spec.u(w_up) + (1.0 - p_up) * spec.u(w_dn))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_fraction_matches_direct_formula() {
        let (u, d, p, x) = (1.3f64, 0.8f64, 0.6f64, 2.0f64);
        let pi = (p * (u - 1.0) - (1.0 - p) * (1.0 - d)) / ((u - 1.0) * (1.0 - d));
        let direct = x.ln()
            + p * (1.0 + pi * (u - 1.0)).ln()
            + (1.0 - p) * (1.0 + pi * (d - 1.0)).ln();
        let got =
            merton_one_period_value(&UtilitySpec::log(), 1.0, u, d, p, x).unwrap();
        assert!((got - direct).abs() < 1e-14);
    }

    #[test]
    fn crra_first_order_condition_holds_at_the_optimum() {
        let spec = UtilitySpec::crra(3.0).unwrap();
        let (u, d, p, x) = (1.25, 0.85, 0.55, 1.0);
        // scan the fraction around the reported optimum: value must be maximal
        let best = merton_one_period_value(&spec, 1.0, u, d, p, x).unwrap();
        for pi in [-0.5, 0.0, 0.3, 0.8, 1.5, 3.0] {
            let wu = x * (1.0 + pi * (u - 1.0));
            let wd = x * (1.0 + pi * (d - 1.0));
            if wu <= 0.0 || wd <= 0.0 {
                continue;
            }
            let v = p * spec.u(wu) + (1.0 - p) * spec.u(wd);
            assert!(v <= best + 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_returns() {
        assert!(merton_one_period_value(&UtilitySpec::log(), 1.0, 1.2, 1.1, 0.5, 1.0).is_err());
    }
}
