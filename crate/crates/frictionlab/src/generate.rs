//! Seeded market generators.
//!
//! Every generator emits multiplicative price trees whose one-step factors
//! straddle 1 at each node, so a frictionless martingale selector exists and
//! the instance admits consistent price systems for every cost level.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::market::Market;
use crate::tree::{AdaptedProcess, Node, ScenarioTree};

/// Non-recombining binomial market: factors `exp(+-vol)`, probabilities
/// `(p_up, 1 - p_up)`, root price 1. Deterministic.
pub fn binomial_market(depth: usize, vol: f64, p_up: f64, lambda: f64) -> Result<Market> {
    if depth == 0 || !(vol > 0.0) || !(p_up > 0.0 && p_up < 1.0) {
        return Err(Error::Config(
            "binomial generator needs depth >= 1, vol > 0, 0 < p_up < 1".into(),
        ));
    }
    let branches = vec![
        (vol.exp(), p_up),
        ((-vol).exp(), 1.0 - p_up),
    ];
    build(depth, lambda, |_rng, _t| branches.clone(), None)
}

/// Non-recombining trinomial market with a flat middle branch.
pub fn trinomial_market(depth: usize, vol: f64, lambda: f64) -> Result<Market> {
    if depth == 0 || !(vol > 0.0) {
        return Err(Error::Config("trinomial generator needs depth >= 1, vol > 0".into()));
    }
    let branches = vec![
        (vol.exp(), 0.3),
        (1.0, 0.4),
        ((-vol).exp(), 0.3),
    ];
    build(depth, lambda, |_rng, _t| branches.clone(), None)
}

/// Random market: per-node branching in `2..=max_branching`, the first two
/// factors forced to straddle 1, probabilities floored away from zero.
pub fn random_market(
    depth: usize,
    max_branching: usize,
    vol: f64,
    lambda: f64,
    seed: u64,
) -> Result<Market> {
    if depth == 0 || max_branching < 2 || !(vol > 0.0) {
        return Err(Error::Config(
            "random generator needs depth >= 1, branching >= 2, vol > 0".into(),
        ));
    }
    let sampler = move |rng: &mut ChaCha12Rng, _t: usize| {
        let b = rng.gen_range(2..=max_branching);
        let mut factors = Vec::with_capacity(b);
        factors.push((vol * rng.gen_range(0.5..1.5)).exp());
        factors.push((-vol * rng.gen_range(0.5..1.5)).exp());
        for _ in 2..b {
            factors.push((vol * rng.gen_range(-1.5..1.5)).exp());
        }
        // probabilities: uniform draws floored at 0.05 and renormalized
        let raw: Vec<f64> = (0..b).map(|_| rng.gen_range(0.05..1.0)).collect();
        let mass: f64 = raw.iter().sum();
        factors
            .into_iter()
            .zip(raw)
            .map(|(f, w)| (f, w / mass))
            .collect::<Vec<_>>()
    };
    build(depth, lambda, sampler, Some(seed))
}

fn build(
    depth: usize,
    lambda: f64,
    mut branch_sampler: impl FnMut(&mut ChaCha12Rng, usize) -> Vec<(f64, f64)>,
    seed: Option<u64>,
) -> Result<Market> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed.unwrap_or(0));
    let mut nodes = vec![Node { id: 0, parent: None, t: 0, p: 1.0 }];
    let mut prices = vec![1.0f64];
    let mut frontier = vec![0usize];
    for t in 1..=depth {
        let mut next_frontier = Vec::new();
        for &parent in &frontier {
            let branches = branch_sampler(&mut rng, t);
            // exact unit mass guards the tree validator against rounding
            let mass: f64 = branches.iter().map(|&(_, p)| p).sum();
            for (factor, p) in branches {
                let id = nodes.len();
                nodes.push(Node {
                    id,
                    parent: Some(parent),
                    t,
                    p: p / mass,
                });
                prices.push(prices[parent] * factor);
                next_frontier.push(id);
            }
        }
        frontier = next_frontier;
    }
    let tree = ScenarioTree::new(depth, nodes)?;
    Market::new(tree, AdaptedProcess(prices), lambda)
}
