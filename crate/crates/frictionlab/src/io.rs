//! Market and tree file formats.
//!
//! Tree file: `{"horizon": T, "nodes": [{"id", "parent", "t", "p"}]}` with
//! dense ids `0..N-1` and the root at id 0. A market file adds
//! `{"lambda": float, "S": [float per node]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::Market;
use crate::tree::{AdaptedProcess, Node, ScenarioTree};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeFile {
    id: usize,
    parent: Option<usize>,
    t: usize,
    p: f64,
}

/// Serialized tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeFile {
    pub horizon: usize,
    nodes: Vec<NodeFile>,
}

/// Serialized market: tree plus cost level and prices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketFile {
    pub horizon: usize,
    nodes: Vec<NodeFile>,
    pub lambda: f64,
    #[serde(rename = "S")]
    pub prices: Vec<f64>,
}

impl From<&ScenarioTree> for TreeFile {
    fn from(tree: &ScenarioTree) -> Self {
        Self {
            horizon: tree.horizon(),
            nodes: tree
                .nodes()
                .iter()
                .map(|n| NodeFile {
                    id: n.id,
                    parent: n.parent,
                    t: n.t,
                    p: n.p,
                })
                .collect(),
        }
    }
}

impl TreeFile {
    pub fn into_tree(self) -> Result<ScenarioTree> {
        let nodes = self
            .nodes
            .into_iter()
            .map(|n| Node {
                id: n.id,
                parent: n.parent,
                t: n.t,
                p: n.p,
            })
            .collect();
        ScenarioTree::new(self.horizon, nodes)
    }
}

impl From<&Market> for MarketFile {
    fn from(market: &Market) -> Self {
        let tree: TreeFile = market.tree().into();
        Self {
            horizon: tree.horizon,
            nodes: tree.nodes,
            lambda: market.lambda(),
            prices: market.price().values().to_vec(),
        }
    }
}

impl MarketFile {
    pub fn into_market(self) -> Result<Market> {
        let tree = TreeFile {
            horizon: self.horizon,
            nodes: self.nodes,
        }
        .into_tree()?;
        Market::new(tree, AdaptedProcess(self.prices), self.lambda)
    }
}

pub fn save_market(market: &Market, path: &Path) -> Result<()> {
    let file: MarketFile = market.into();
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_market(path: &Path) -> Result<Market> {
    let data = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let file: MarketFile = serde_json::from_str(&data)?;
    file.into_market()
}
