//! Property-based invariants on randomly generated trees and markets.

use proptest::prelude::*;

use frictionlab::generate;
use frictionlab::market::{holdings, liquidation_value, Market, TradingStrategy};
use frictionlab::preferences::UtilitySpec;
use frictionlab::tree::{
    classify_martingale, conditional_expectation, doob_decompose, first_crossing,
    AdaptedProcess, MartingaleClass, ScenarioTree, StoppingRegion,
};

fn arb_market() -> impl Strategy<Value = Market> {
    (1usize..=4, 2usize..=3, 0u64..500, 0.0f64..0.4).prop_map(|(depth, branch, seed, lambda)| {
        generate::random_market(depth, branch, 0.3, lambda, seed).unwrap()
    })
}

/// Deterministic pseudo-random node values from a seed.
fn arb_process(tree: &ScenarioTree, seed: u64) -> AdaptedProcess {
    AdaptedProcess::from_fn(tree, |n| {
        let z = (seed ^ (n as u64).wrapping_mul(0x9E3779B97F4A7C15)).wrapping_mul(0x2545F4914F6CDD1D);
        ((z >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
    })
}

/// Path-enumeration oracle for the stopped conditional expectation.
fn path_sum_oracle(
    tree: &ScenarioTree,
    x: &AdaptedProcess,
    region: &StoppingRegion,
    node: usize,
) -> f64 {
    let mut total = 0.0;
    for &l in tree.leaves() {
        let path = tree.root_path(l);
        if !path.contains(&node) {
            continue;
        }
        let hit = path
            .iter()
            .copied()
            .find(|&n| region.contains(n))
            .expect("region covers every path");
        total += tree.prob(l) * x[hit];
    }
    total / tree.prob(node)
}

proptest! {
    #[test]
    fn tower_property_holds(market in arb_market(), seed in 0u64..1000) {
        let tree = market.tree();
        let x = arb_process(tree, seed);
        let leaves_region = StoppingRegion::leaves(tree);
        for t in 0..tree.horizon() {
            // y_t = E[x_T | F_t], then E[y_t] = E[x_T]
            let mut y = AdaptedProcess::constant(tree, 0.0);
            for &n in tree.level(t) {
                y[n] = conditional_expectation(tree, &x, &leaves_region, n).unwrap();
            }
            let level = StoppingRegion::at_time(tree, t).unwrap();
            let outer = conditional_expectation(tree, &y, &level, 0).unwrap();
            let direct = conditional_expectation(tree, &x, &leaves_region, 0).unwrap();
            prop_assert!((outer - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn conditional_expectation_matches_path_enumeration(
        market in arb_market(),
        seed in 0u64..1000,
        t in 0usize..3,
    ) {
        let tree = market.tree();
        let x = arb_process(tree, seed);
        let t = t.min(tree.horizon());
        let region = StoppingRegion::at_time(tree, t).unwrap();
        for &n in tree.level(t.min(1)) {
            if tree.time(n) > t {
                continue;
            }
            let got = conditional_expectation(tree, &x, &region, n).unwrap();
            let want = path_sum_oracle(tree, &x, &region, n);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn stop_at_identity(market in arb_market(), seed in 0u64..1000) {
        let tree = market.tree();
        let x = arb_process(tree, seed);
        for n in 0..tree.len() {
            let region = StoppingRegion::stop_at(tree, &[n]).unwrap();
            prop_assert_eq!(conditional_expectation(tree, &x, &region, n).unwrap(), x[n]);
        }
    }

    #[test]
    fn doob_recombination_and_martingale_part(market in arb_market(), seed in 0u64..1000) {
        let tree = market.tree();
        // build a supermartingale: conditional expectations of a terminal
        // payoff, damped by a deterministic decreasing factor
        let terminal = arb_process(tree, seed).map(|v| v.abs() + 0.1);
        let leaves_region = StoppingRegion::leaves(tree);
        let mut y = AdaptedProcess::constant(tree, 0.0);
        for n in 0..tree.len() {
            let m = conditional_expectation(tree, &terminal, &leaves_region, n).unwrap();
            y[n] = m * 0.9f64.powi(tree.time(n) as i32);
        }
        // damping a positive martingale yields a supermartingale only if it
        // decreases; 0.9^t does
        let dec = doob_decompose(tree, &y, 1e-10).unwrap();
        for n in 0..tree.len() {
            let recombined = dec.martingale[n] - dec.compensator[n];
            prop_assert!((recombined - y[n]).abs() <= 1e-12 * y[n].abs().max(1.0));
            if let Some(p) = tree.parent(n) {
                prop_assert!(dec.compensator[n] >= dec.compensator[p] - 1e-15);
            }
        }
        prop_assert_eq!(dec.compensator[0], 0.0);
        let report = classify_martingale(tree, &dec.martingale, 1e-9).unwrap();
        prop_assert_eq!(report.class, MartingaleClass::Martingale);
    }

    #[test]
    fn first_crossing_agrees_with_path_scan(
        market in arb_market(),
        lower in 0.5f64..0.9,
        upper in 1.1f64..2.0,
    ) {
        let tree = market.tree();
        let ratio = AdaptedProcess::from_fn(tree, |n| market.ask(n) / market.ask(0));
        let start = StoppingRegion::stop_at(tree, &[0]).unwrap();
        let region = first_crossing(tree, &ratio, lower, upper, &start).unwrap();
        // per path, the region node is the first crossing or the leaf
        for &l in tree.leaves() {
            let path = tree.root_path(l);
            let expected = path
                .iter()
                .copied()
                .find(|&n| ratio[n] <= lower || ratio[n] >= upper)
                .unwrap_or(l);
            let hit = path.iter().copied().find(|&n| region.contains(n)).unwrap();
            prop_assert_eq!(hit, expected);
        }
    }

    #[test]
    fn holdings_positively_homogeneous(
        market in arb_market(),
        c in 0.1f64..10.0,
        volume in 0.01f64..0.5,
    ) {
        let tree = market.tree();
        let mut strategy = TradingStrategy::zero(tree);
        strategy.buy[0] = volume;
        for &l in tree.leaves() {
            strategy.sell[l] = volume;
        }
        let x = 1.0;
        let h1 = holdings(&market, &strategy, x).unwrap();
        let hc = holdings(&market, &strategy.scaled(c), c * x).unwrap();
        for n in 0..tree.len() {
            prop_assert!((hc.bond[n] - c * h1.bond[n]).abs() <= 1e-12 * h1.bond[n].abs().max(1.0) * c);
            prop_assert!((hc.stock[n] - c * h1.stock[n]).abs() <= 1e-12 * c);
        }
    }

    #[test]
    fn round_trip_burns_exactly_the_spread(
        market in arb_market(),
        volume in 0.01f64..1.0,
    ) {
        let tree = market.tree();
        let mut strategy = TradingStrategy::zero(tree);
        strategy.buy[0] = volume;
        strategy.sell[0] = volume;
        let x = 2.0;
        let h = holdings(&market, &strategy, x).unwrap();
        let burn = market.lambda() * market.ask(0) * volume;
        prop_assert!((h.bond[0] - (x - burn)).abs() <= 1e-12 * x);
        prop_assert_eq!(h.stock[0], 0.0);
        // liquidation value at the root equals the bond (flat stock)
        let liq = liquidation_value(&market, &h);
        prop_assert_eq!(liq[0], h.bond[0]);
    }

    #[test]
    fn fenchel_young_inequality(
        gamma in prop_oneof![Just(0.5f64), Just(2.0), Just(3.0)],
        x in 0.05f64..20.0,
        y in 0.05f64..20.0,
    ) {
        for spec in [UtilitySpec::log(), UtilitySpec::crra(gamma).unwrap()] {
            let gap = spec.u(x) - spec.conjugate(y) - x * y;
            prop_assert!(gap <= 1e-10, "{spec}: U(x) - V(y) - xy = {gap}");
            // equality at the maximizer
            let tight = spec.u(x) - spec.conjugate(spec.marginal(x)) - x * spec.marginal(x);
            prop_assert!(tight.abs() <= 1e-10);
            // inverse identities
            prop_assert!((spec.inverse_marginal(spec.marginal(x)) - x).abs() <= 1e-12 * x);
            prop_assert!((spec.conjugate_marginal(y) + spec.inverse_marginal(y)).abs()
                <= 1e-12 * spec.inverse_marginal(y));
        }
    }
}
