//! Frictional market model: strictly positive price process, proportional
//! transaction costs, self-financing trading strategies, liquidation value
//! and admissibility.
//!
//! Buying executes at the ask `S`, selling at the bid `(1 - lambda) S`; both
//! at the executing node's own prices. Holdings are built with the equality
//! form of the self-financing constraint (no free disposal); the inequality
//! form is available as a verification predicate for externally supplied
//! holdings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{AdaptedProcess, ScenarioTree};

/// Scenario tree, strictly positive price process and cost level.
///
/// `lambda = 0` is the frictionless degenerate case used by shadow-price
/// verification; the bid-ask spread is then a single point.
#[derive(Debug, Clone)]
pub struct Market {
    tree: ScenarioTree,
    price: AdaptedProcess,
    lambda: f64,
}

impl Market {
    pub fn new(tree: ScenarioTree, price: AdaptedProcess, lambda: f64) -> Result<Self> {
        if price.len() != tree.len() {
            return Err(Error::Structural(
                "price process length does not match tree".into(),
            ));
        }
        if !price.values().iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::Domain(
                "price process must be strictly positive and finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::Domain(format!(
                "transaction cost level {} outside [0, 1)",
                lambda
            )));
        }
        Ok(Self { tree, price, lambda })
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn price(&self) -> &AdaptedProcess {
        &self.price
    }

    pub fn ask(&self, node: usize) -> f64 {
        self.price[node]
    }

    pub fn bid(&self, node: usize) -> f64 {
        (1.0 - self.lambda) * self.price[node]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Same tree and prices, different cost level.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.tree.clone(), self.price.clone(), lambda)
    }

    /// Same prices and costs on a re-weighted tree (measure tilt).
    pub fn with_tree(&self, tree: ScenarioTree) -> Result<Self> {
        Self::new(tree, self.price.clone(), self.lambda)
    }

    /// Frictionless market with the given price selector.
    pub fn frictionless(&self, price: AdaptedProcess) -> Result<Self> {
        Self::new(self.tree.clone(), price, 0.0)
    }
}

/// Per-node buy and sell volumes, executed at that node's prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradingStrategy {
    pub buy: AdaptedProcess,
    pub sell: AdaptedProcess,
}

impl TradingStrategy {
    pub fn new(buy: AdaptedProcess, sell: AdaptedProcess) -> Result<Self> {
        if buy.len() != sell.len() {
            return Err(Error::Structural("buy/sell length mismatch".into()));
        }
        let ok = |p: &AdaptedProcess| p.values().iter().all(|&v| v.is_finite() && v >= 0.0);
        if !ok(&buy) || !ok(&sell) {
            return Err(Error::Domain(
                "trade volumes must be non-negative and finite".into(),
            ));
        }
        Ok(Self { buy, sell })
    }

    pub fn zero(tree: &ScenarioTree) -> Self {
        Self {
            buy: AdaptedProcess::constant(tree, 0.0),
            sell: AdaptedProcess::constant(tree, 0.0),
        }
    }

    /// Net trade at a node.
    pub fn net(&self, node: usize) -> f64 {
        self.buy[node] - self.sell[node]
    }

    /// Cancels simultaneous buy and sell volume at each node. Netting never
    /// decreases terminal wealth: a round trip only burns the spread.
    pub fn netted(&self) -> Self {
        let buy = self.buy.zip_with(&self.sell, |b, s| (b - s).max(0.0));
        let sell = self.sell.zip_with(&self.buy, |s, b| (s - b).max(0.0));
        Self { buy, sell }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            buy: self.buy.map(|v| c * v),
            sell: self.sell.map(|v| c * v),
        }
    }
}

/// Post-trade bond and stock holdings at every node, together with the
/// initial cash endowment they were built from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldingsProcess {
    pub bond: AdaptedProcess,
    pub stock: AdaptedProcess,
    pub initial_cash: f64,
}

/// Admissibility report: worst node and worst liquidation value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    pub worst_node: usize,
    pub worst_value: f64,
    /// Largest absolute post-trade stock holding over leaves.
    pub max_leaf_stock: f64,
}

/// Holdings induced by a strategy from the pre-trade endowment `(x, 0)`:
/// at each node the stock moves by `buy - sell` and the bond pays the ask
/// for purchases and receives the bid for sales (equality form).
pub fn holdings(market: &Market, strategy: &TradingStrategy, x: f64) -> Result<HoldingsProcess> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("initial endowment {} must be > 0", x)));
    }
    let tree = market.tree();
    if strategy.buy.len() != tree.len() {
        return Err(Error::Structural("strategy length does not match tree".into()));
    }
    let mut bond = AdaptedProcess::constant(tree, 0.0);
    let mut stock = AdaptedProcess::constant(tree, 0.0);
    for n in 0..tree.len() {
        let (b0, s0) = match tree.parent(n) {
            Some(p) => (bond[p], stock[p]),
            None => (x, 0.0),
        };
        let up = strategy.buy[n];
        let down = strategy.sell[n];
        stock[n] = s0 + up - down;
        bond[n] = b0 - market.ask(n) * up + market.bid(n) * down;
    }
    Ok(HoldingsProcess {
        bond,
        stock,
        initial_cash: x,
    })
}

/// Node-wise liquidation value: bond plus long stock marked at the bid,
/// short stock covered at the ask.
pub fn liquidation_value(market: &Market, h: &HoldingsProcess) -> AdaptedProcess {
    let tree = market.tree();
    AdaptedProcess::from_fn(tree, |n| {
        let s = h.stock[n];
        h.bond[n] + s.max(0.0) * market.bid(n) - (-s).max(0.0) * market.ask(n)
    })
}

/// A strategy is admissible if its liquidation value stays above `-tol` at
/// every node and the post-trade stock holding vanishes at every leaf.
pub fn is_admissible(
    market: &Market,
    strategy: &TradingStrategy,
    x: f64,
    tol: f64,
) -> Result<AdmissibilityReport> {
    if tol < 0.0 {
        return Err(Error::Precondition("tolerance must be >= 0".into()));
    }
    let h = holdings(market, strategy, x)?;
    Ok(admissibility_of(market, &h, tol))
}

/// Admissibility of already-built holdings.
pub fn admissibility_of(market: &Market, h: &HoldingsProcess, tol: f64) -> AdmissibilityReport {
    let tree = market.tree();
    let liq = liquidation_value(market, h);
    let (mut worst_node, mut worst_value) = (0usize, f64::INFINITY);
    for n in 0..tree.len() {
        if liq[n] < worst_value {
            worst_value = liq[n];
            worst_node = n;
        }
    }
    let max_leaf_stock = tree
        .leaves()
        .iter()
        .map(|&l| h.stock[l].abs())
        .fold(0.0, f64::max);
    AdmissibilityReport {
        admissible: worst_value >= -tol && max_leaf_stock <= tol,
        worst_node,
        worst_value,
        max_leaf_stock,
    }
}

/// Verification predicate for externally supplied holdings: at every node the
/// bond increment must not exceed the trading cash flow implied by the stock
/// increment split into its positive and negative parts (the inequality form
/// of the self-financing constraint, which permits free disposal of cash).
pub fn check_self_financing(market: &Market, h: &HoldingsProcess, tol: f64) -> Result<bool> {
    if tol < 0.0 {
        return Err(Error::Precondition("tolerance must be >= 0".into()));
    }
    let tree = market.tree();
    if h.bond.len() != tree.len() || h.stock.len() != tree.len() {
        return Err(Error::Structural("holdings length does not match tree".into()));
    }
    for n in 0..tree.len() {
        let (b0, s0) = match tree.parent(n) {
            Some(p) => (h.bond[p], h.stock[p]),
            None => (h.initial_cash, 0.0),
        };
        let db = h.bond[n] - b0;
        let ds = h.stock[n] - s0;
        let cash_flow = -market.ask(n) * ds.max(0.0) + market.bid(n) * (-ds).max(0.0);
        if db > cash_flow + tol {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Node;

    fn one_period_market(s_up: f64, s_dn: f64, lambda: f64) -> Market {
        let nodes = vec![
            Node { id: 0, parent: None, t: 0, p: 1.0 },
            Node { id: 1, parent: Some(0), t: 1, p: 0.5 },
            Node { id: 2, parent: Some(0), t: 1, p: 0.5 },
        ];
        let tree = ScenarioTree::new(1, nodes).unwrap();
        let price = AdaptedProcess(vec![1.0, s_up, s_dn]);
        Market::new(tree, price, lambda).unwrap()
    }

    #[test]
    fn zero_strategy_keeps_endowment() {
        let market = one_period_market(2.0, 0.5, 0.1);
        let strategy = TradingStrategy::zero(market.tree());
        let h = holdings(&market, &strategy, 1.5).unwrap();
        assert!(h.bond.values().iter().all(|&b| b == 1.5));
        assert!(h.stock.values().iter().all(|&s| s == 0.0));
        let liq = liquidation_value(&market, &h);
        assert!(liq.values().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn buy_one_share_at_root() {
        let market = one_period_market(2.0, 0.5, 0.1);
        let mut strategy = TradingStrategy::zero(market.tree());
        strategy.buy[0] = 1.0;
        let h = holdings(&market, &strategy, 3.0).unwrap();
        assert_eq!(h.bond[0], 2.0);
        assert_eq!(h.stock[0], 1.0);
    }

    #[test]
    fn buy_at_one_sell_at_two_terminal_bond() {
        // buying one stock at price 1, selling at price 2 nets x - 1 + 2 (1 - lambda)
        let lambda = 0.25;
        let market = one_period_market(2.0, 2.0, lambda);
        let mut strategy = TradingStrategy::zero(market.tree());
        strategy.buy[0] = 1.0;
        strategy.sell[1] = 1.0;
        strategy.sell[2] = 1.0;
        let x = 1.0;
        let h = holdings(&market, &strategy, x).unwrap();
        for leaf in [1usize, 2] {
            assert!((h.bond[leaf] - (x - 1.0 + 2.0 * (1.0 - lambda))).abs() < 1e-15);
            assert_eq!(h.stock[leaf], 0.0);
        }
    }

    #[test]
    fn liquidation_matches_hand_formula() {
        let market = one_period_market(1.8, 0.7, 0.2);
        let h = HoldingsProcess {
            bond: AdaptedProcess(vec![0.3, -0.4, 0.9]),
            stock: AdaptedProcess(vec![1.0, 2.0, -0.5]),
            initial_cash: 1.0,
        };
        let liq = liquidation_value(&market, &h);
        assert!((liq[0] - (0.3 + 1.0 * 0.8 * 1.0)).abs() < 1e-15);
        assert!((liq[1] - (-0.4 + 2.0 * 0.8 * 1.8)).abs() < 1e-15);
        assert!((liq[2] - (0.9 - 0.5 * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn sandwich_proof_worst_case_liquidates_to_zero() {
        // bond -(1-lambda)(1-eps), stock 1/S_sigma at a node where S = (1-eps) S_sigma
        let (lambda, eps, s_sigma) = (0.1, 0.3, 2.0);
        let market = one_period_market((1.0 - eps) * s_sigma, (1.0 + eps) * s_sigma, lambda);
        let h = HoldingsProcess {
            bond: AdaptedProcess(vec![0.0, -(1.0 - lambda) * (1.0 - eps), 0.0]),
            stock: AdaptedProcess(vec![0.0, 1.0 / s_sigma, 0.0]),
            initial_cash: 1.0,
        };
        let liq = liquidation_value(&market, &h);
        assert!(liq[1].abs() < 1e-15);
    }

    #[test]
    fn overbuying_is_inadmissible() {
        let market = one_period_market(2.0, 0.5, 0.1);
        let x = 1.0;
        let mut strategy = TradingStrategy::zero(market.tree());
        strategy.buy[0] = x / market.ask(0) + 1.0;
        // liquidate at leaves so the terminal holding is flat
        strategy.sell[1] = strategy.buy[0];
        strategy.sell[2] = strategy.buy[0];
        let report = is_admissible(&market, &strategy, x, 1e-12).unwrap();
        assert!(!report.admissible);
        assert!(report.worst_value < 0.0);
    }

    #[test]
    fn zero_strategy_is_admissible() {
        let market = one_period_market(2.0, 0.5, 0.1);
        let report =
            is_admissible(&market, &TradingStrategy::zero(market.tree()), 1.0, 0.0).unwrap();
        assert!(report.admissible);
        assert_eq!(report.worst_value, 1.0);
    }

    #[test]
    fn self_financing_verification() {
        let market = one_period_market(2.0, 0.5, 0.1);
        let mut strategy = TradingStrategy::zero(market.tree());
        strategy.buy[0] = 0.4;
        strategy.sell[1] = 0.4;
        strategy.sell[2] = 0.4;
        let h = holdings(&market, &strategy, 1.0).unwrap();
        assert!(check_self_financing(&market, &h, 1e-12).unwrap());

        // inflating the bond at a node violates the constraint by 1
        let mut inflated = h.clone();
        inflated.bond[1] += 1.0;
        assert!(!check_self_financing(&market, &inflated, 1e-12).unwrap());

        // throwing cash away is permitted by the inequality form
        let mut disposed = h;
        disposed.bond[2] -= 0.2;
        assert!(check_self_financing(&market, &disposed, 1e-12).unwrap());
    }

    #[test]
    fn round_trip_burns_the_spread() {
        let (lambda, v) = (0.17, 0.6);
        let market = one_period_market(2.0, 0.5, lambda);
        let mut strategy = TradingStrategy::zero(market.tree());
        strategy.buy[0] = v;
        strategy.sell[0] = v;
        let h = holdings(&market, &strategy, 1.0).unwrap();
        assert!((h.bond[0] - (1.0 - lambda * market.ask(0) * v)).abs() < 1e-15);
        assert_eq!(h.stock[0], 0.0);
    }

    #[test]
    fn netting_removes_round_trips() {
        let market = one_period_market(2.0, 0.5, 0.1);
        let mut strategy = TradingStrategy::zero(market.tree());
        strategy.buy[0] = 0.7;
        strategy.sell[0] = 0.3;
        let netted = strategy.netted();
        assert!((netted.buy[0] - 0.4).abs() < 1e-15);
        assert_eq!(netted.sell[0], 0.0);
    }

    #[test]
    fn holdings_are_positively_homogeneous() {
        let market = one_period_market(1.9, 0.6, 0.15);
        let mut strategy = TradingStrategy::zero(market.tree());
        strategy.buy[0] = 0.5;
        strategy.sell[1] = 0.5;
        strategy.sell[2] = 0.5;
        let (x, c) = (2.0, 3.5);
        let h1 = holdings(&market, &strategy, x).unwrap();
        let h2 = holdings(&market, &strategy.scaled(c), c * x).unwrap();
        for n in 0..market.tree().len() {
            assert!((h2.bond[n] - c * h1.bond[n]).abs() < 1e-12);
            assert!((h2.stock[n] - c * h1.stock[n]).abs() < 1e-12);
        }
    }
}
