//! Finite filtered probability spaces as rooted scenario trees.
//!
//! A [`ScenarioTree`] stores conditional transition probabilities per node;
//! unconditional path probabilities are derived, never stored. Adapted
//! processes are plain per-node value vectors, stopping times are antichains
//! of node ids that meet every root-to-leaf path exactly once, and the
//! discrete Doob decomposition splits a supermartingale into a martingale
//! and a predictable non-decreasing compensator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-12;

/// One node of a scenario tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    /// Parent id; `None` exactly at the root.
    pub parent: Option<usize>,
    /// Time index, 0 at the root, `horizon` at every leaf.
    pub t: usize,
    /// Conditional transition probability given the parent (1.0 at the root).
    pub p: f64,
}

/// A rooted scenario tree with conditional transition probabilities.
///
/// Node ids are dense `0..len()` with the root at id 0. The children of each
/// node carry conditional probabilities summing to one, so the unconditional
/// probability of a node is the product of conditional weights along its
/// root path.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    nodes: Vec<Node>,
    horizon: usize,
    children: Vec<Vec<usize>>,
    prob: Vec<f64>,
    leaves: Vec<usize>,
    levels: Vec<Vec<usize>>,
}

impl ScenarioTree {
    pub fn new(horizon: usize, nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Structural("tree has no nodes".into()));
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Structural(format!(
                    "node ids must be dense 0..{}; found id {} at position {}",
                    nodes.len(),
                    n.id,
                    i
                )));
            }
        }
        if nodes[0].parent.is_some() || nodes[0].t != 0 {
            return Err(Error::Structural(
                "node 0 must be the root: parent = null, t = 0".into(),
            ));
        }
        if (nodes[0].p - 1.0).abs() > PROB_TOL {
            return Err(Error::Structural(format!(
                "root conditional probability must be 1, got {}",
                nodes[0].p
            )));
        }

        let mut children = vec![Vec::new(); nodes.len()];
        for n in nodes.iter().skip(1) {
            let parent = n.parent.ok_or_else(|| {
                Error::Structural(format!("non-root node {} has no parent", n.id))
            })?;
            if parent >= nodes.len() {
                return Err(Error::Structural(format!(
                    "node {} references missing parent {}",
                    n.id, parent
                )));
            }
            if n.t != nodes[parent].t + 1 {
                return Err(Error::Structural(format!(
                    "node {} has t = {} but parent {} has t = {}",
                    n.id, n.t, parent, nodes[parent].t
                )));
            }
            if !(n.p > 0.0 && n.p <= 1.0) {
                return Err(Error::Structural(format!(
                    "node {} conditional probability {} outside (0, 1]",
                    n.id, n.p
                )));
            }
            children[parent].push(n.id);
        }

        let mut prob = vec![0.0; nodes.len()];
        prob[0] = 1.0;
        for n in nodes.iter().skip(1) {
            prob[n.id] = prob[n.parent.unwrap()] * n.p;
            if prob[n.id] <= 0.0 {
                return Err(Error::Structural(format!(
                    "node {} has non-positive path probability",
                    n.id
                )));
            }
        }

        let mut leaves = Vec::new();
        for n in &nodes {
            if children[n.id].is_empty() {
                if n.t != horizon {
                    return Err(Error::Structural(format!(
                        "leaf {} at t = {} but horizon is {}",
                        n.id, n.t, horizon
                    )));
                }
                leaves.push(n.id);
            } else {
                let mass: f64 = children[n.id].iter().map(|&c| nodes[c].p).sum();
                if (mass - 1.0).abs() > PROB_TOL {
                    return Err(Error::Structural(format!(
                        "children of node {} have probability mass {} != 1",
                        n.id, mass
                    )));
                }
            }
        }

        let mut levels = vec![Vec::new(); horizon + 1];
        for n in &nodes {
            levels[n.t].push(n.id);
        }
        if levels.iter().any(|l| l.is_empty()) {
            return Err(Error::Structural("some time level has no nodes".into()));
        }

        Ok(Self {
            nodes,
            horizon,
            children,
            prob,
            leaves,
            levels,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.nodes[id].parent
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.children[id].is_empty()
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn level(&self, t: usize) -> &[usize] {
        &self.levels[t]
    }

    pub fn time(&self, id: usize) -> usize {
        self.nodes[id].t
    }

    /// Unconditional path probability of a node.
    pub fn prob(&self, id: usize) -> f64 {
        self.prob[id]
    }

    /// Conditional transition probability of a node given its parent.
    pub fn cond_prob(&self, id: usize) -> f64 {
        self.nodes[id].p
    }

    /// Non-leaf node ids in increasing order.
    pub fn non_leaves(&self) -> Vec<usize> {
        (0..self.len()).filter(|&n| !self.is_leaf(n)).collect()
    }

    /// True if `a` is a strict ancestor of `b`.
    pub fn is_strict_ancestor(&self, a: usize, b: usize) -> bool {
        let mut cur = self.parent(b);
        while let Some(m) = cur {
            if m == a {
                return true;
            }
            cur = self.parent(m);
        }
        false
    }

    /// Ids on the root path of `id`, root first, `id` last.
    pub fn root_path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// A tree with the same shape but different conditional probabilities.
    pub fn with_cond_probs(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.len() {
            return Err(Error::Structural(
                "conditional probability vector length mismatch".into(),
            ));
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                id: n.id,
                parent: n.parent,
                t: n.t,
                p: p[n.id],
            })
            .collect();
        Self::new(self.horizon, nodes)
    }

    /// Expectation of the terminal (leaf) values of a process.
    pub fn expectation(&self, x: &AdaptedProcess) -> f64 {
        self.leaves.iter().map(|&l| self.prob[l] * x[l]).sum()
    }
}

/// A real-valued process with one value per tree node. Adaptedness is
/// structural: a node's value is measurable in the information at that node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedProcess(pub Vec<f64>);

impl AdaptedProcess {
    pub fn constant(tree: &ScenarioTree, c: f64) -> Self {
        Self(vec![c; tree.len()])
    }

    pub fn from_fn(tree: &ScenarioTree, f: impl Fn(usize) -> f64) -> Self {
        Self((0..tree.len()).map(f).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    fn check_len(&self, tree: &ScenarioTree) -> Result<()> {
        if self.len() != tree.len() {
            return Err(Error::Structural(format!(
                "process has {} values but tree has {} nodes",
                self.len(),
                tree.len()
            )));
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for AdaptedProcess {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for AdaptedProcess {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// A stopping time represented as the antichain of nodes where it stops.
///
/// On a finite tree this representation is exact: the set meets every
/// root-to-leaf path exactly once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoppingRegion {
    ids: Vec<usize>,
}

impl StoppingRegion {
    /// Validates the antichain and exact-once path coverage properties.
    pub fn new(tree: &ScenarioTree, mut ids: Vec<usize>) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if ids.iter().any(|&id| id >= tree.len()) {
            return Err(Error::Structural("region references missing node".into()));
        }
        let mut member = vec![false; tree.len()];
        for &id in &ids {
            member[id] = true;
        }
        // Count hits along every root-to-leaf path in one downward sweep.
        let mut hits = vec![0usize; tree.len()];
        for n in 0..tree.len() {
            let inherited = match tree.parent(n) {
                Some(p) => hits[p],
                None => 0,
            };
            hits[n] = inherited + usize::from(member[n]);
        }
        for &l in tree.leaves() {
            if hits[l] != 1 {
                return Err(Error::Structural(format!(
                    "region must meet every root-to-leaf path exactly once; path to leaf {} has {} hits",
                    l, hits[l]
                )));
            }
        }
        Ok(Self { ids })
    }

    /// The stopping time "stop at the first node of `hit`, else at the leaf".
    ///
    /// Always a valid stopping region; with `hit = {n}` it stops at `n` on
    /// paths through `n` and at the terminal date elsewhere.
    pub fn stop_at(tree: &ScenarioTree, hit: &[usize]) -> Result<Self> {
        let mut member = vec![false; tree.len()];
        for &id in hit {
            if id >= tree.len() {
                return Err(Error::Structural("region references missing node".into()));
            }
            member[id] = true;
        }
        let mut ids = Vec::new();
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            if member[n] || tree.is_leaf(n) {
                ids.push(n);
            } else {
                stack.extend_from_slice(tree.children(n));
            }
        }
        Self::new(tree, ids)
    }

    /// Everything stops at the terminal date.
    pub fn leaves(tree: &ScenarioTree) -> Self {
        Self {
            ids: tree.leaves().to_vec(),
        }
    }

    /// Deterministic stopping time at a fixed date.
    pub fn at_time(tree: &ScenarioTree, t: usize) -> Result<Self> {
        if t > tree.horizon() {
            return Err(Error::Structural(format!(
                "time {} beyond horizon {}",
                t,
                tree.horizon()
            )));
        }
        Ok(Self {
            ids: tree.level(t).to_vec(),
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

/// Discrete Doob decomposition `Y = M - A` of a supermartingale:
/// `M` is a martingale and `A` a predictable non-decreasing compensator
/// with `A_0 = 0` (the finite-tree specialization of the
/// Doob-Meyer-Mertens decomposition of optional strong supermartingales).
#[derive(Debug, Clone)]
pub struct DoobDecomposition {
    pub martingale: AdaptedProcess,
    pub compensator: AdaptedProcess,
}

/// One-step martingale classification of a process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MartingaleClass {
    Martingale,
    Supermartingale,
    Submartingale,
    None,
}

/// Result of [`classify_martingale`]: the class together with the largest
/// absolute one-step drift `E[x_{t+1} | F_n] - x_n` over non-leaf nodes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub class: MartingaleClass,
    pub max_residual: f64,
    pub worst_node: usize,
}

/// One-step conditional drift at every non-leaf node.
fn drifts(tree: &ScenarioTree, x: &AdaptedProcess) -> Vec<(usize, f64)> {
    tree.non_leaves()
        .into_iter()
        .map(|n| {
            let e: f64 = tree
                .children(n)
                .iter()
                .map(|&c| tree.cond_prob(c) * x[c])
                .sum();
            (n, e - x[n])
        })
        .collect()
}

/// `E[x_tau | F_node]` for the stopping time `tau` given by `region`.
///
/// `node` must lie on or above the region on every path through it; the
/// result is the probability-weighted average of `x` over the region nodes
/// below `node`, normalized by the probability of `node`.
pub fn conditional_expectation(
    tree: &ScenarioTree,
    x: &AdaptedProcess,
    region: &StoppingRegion,
    node: usize,
) -> Result<f64> {
    x.check_len(tree)?;
    if node >= tree.len() {
        return Err(Error::Structural("missing node".into()));
    }
    for &r in region.ids() {
        if tree.is_strict_ancestor(r, node) {
            return Err(Error::Structural(format!(
                "node {} lies strictly below the stopping region (region node {} is an ancestor)",
                node, r
            )));
        }
    }
    let mut acc = 0.0;
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        if region.contains(n) {
            acc += tree.prob(n) * x[n];
        } else if tree.is_leaf(n) {
            return Err(Error::Structural(format!(
                "path through node {} reaches leaf {} without meeting the region",
                node, n
            )));
        } else {
            stack.extend_from_slice(tree.children(n));
        }
    }
    Ok(acc / tree.prob(node))
}

/// Classifies a process by its one-step conditional drifts. On finite trees
/// the one-step criterion is equivalent to the two-stopping-times definition.
pub fn classify_martingale(
    tree: &ScenarioTree,
    x: &AdaptedProcess,
    tol: f64,
) -> Result<MartingaleReport> {
    x.check_len(tree)?;
    if !(tol > 0.0) {
        return Err(Error::Precondition("classification tolerance must be > 0".into()));
    }
    let ds = drifts(tree, x);
    let (mut up, mut down) = (false, false);
    let (mut worst, mut worst_node) = (0.0f64, 0usize);
    for (n, d) in ds {
        if d > tol {
            up = true;
        }
        if d < -tol {
            down = true;
        }
        if d.abs() > worst {
            worst = d.abs();
            worst_node = n;
        }
    }
    let class = match (up, down) {
        (false, false) => MartingaleClass::Martingale,
        (false, true) => MartingaleClass::Supermartingale,
        (true, false) => MartingaleClass::Submartingale,
        (true, true) => MartingaleClass::None,
    };
    Ok(MartingaleReport {
        class,
        max_residual: worst,
        worst_node,
    })
}

/// Doob decomposition of a supermartingale.
///
/// The compensator increment at the children of node `n` is the common value
/// `-E[dY | F_n]`; upward drift beyond `drift_tol` is a decomposition error,
/// drift within `[-drift_tol, 0)` is clipped so that `A` stays monotone.
pub fn doob_decompose(
    tree: &ScenarioTree,
    y: &AdaptedProcess,
    drift_tol: f64,
) -> Result<DoobDecomposition> {
    y.check_len(tree)?;
    let mut compensator = AdaptedProcess::constant(tree, 0.0);
    for n in 0..tree.len() {
        if tree.is_leaf(n) {
            continue;
        }
        let e: f64 = tree
            .children(n)
            .iter()
            .map(|&c| tree.cond_prob(c) * y[c])
            .sum();
        let increment = y[n] - e;
        if increment < -drift_tol {
            return Err(Error::Decomposition(format!(
                "process drifts upward at node {} by {:.3e}; not a supermartingale within {:.1e}",
                n, -increment, drift_tol
            )));
        }
        let increment = increment.max(0.0);
        for &c in tree.children(n) {
            compensator[c] = compensator[n] + increment;
        }
    }
    let martingale = y.zip_with(&compensator, |yv, av| yv + av);
    Ok(DoobDecomposition {
        martingale,
        compensator,
    })
}

/// First node per path at or after `start` where `x` leaves `[lower, upper]`
/// (crossing by `<= lower` or `>= upper`), else the leaf.
pub fn first_crossing(
    tree: &ScenarioTree,
    x: &AdaptedProcess,
    lower: f64,
    upper: f64,
    start: &StoppingRegion,
) -> Result<StoppingRegion> {
    x.check_len(tree)?;
    if !(lower < upper) {
        return Err(Error::Precondition(format!(
            "crossing bounds must satisfy lower < upper, got [{}, {}]",
            lower, upper
        )));
    }
    let crossed = |v: f64| v <= lower || v >= upper;
    let mut ids = Vec::new();
    for &s in start.ids() {
        let mut stack = vec![s];
        while let Some(n) = stack.pop() {
            if crossed(x[n]) || tree.is_leaf(n) {
                ids.push(n);
            } else {
                stack.extend_from_slice(tree.children(n));
            }
        }
    }
    StoppingRegion::new(tree, ids)
}
