//! Scenario-tree and Monte-Carlo laboratory for numeraire-based utility
//! maximization under proportional transaction costs.
//!
//! The crate solves the frictional primal problem and its dual over
//! consistent price systems on finite scenario trees, verifies the
//! identities of the primal-dual theory (duality gap, first-order
//! conditions, deflator structure, shadow prices), runs static and dynamic
//! stability experiments under perturbations of endowment, preferences and
//! the physical measure, and reconstructs the two-optimal-dual-processes
//! counterexample by Monte-Carlo simulation of a stopped geometric random
//! walk.
//!
//! Start with the runnable programs in `examples/`; the `frictionlab`
//! binary exposes the same capabilities as subcommands.

pub mod barrier;
pub mod duality;
pub mod error;
pub mod generate;
pub mod io;
pub mod market;
pub mod oracle;
pub mod cli;
pub mod counterexample;
pub mod dual;
pub mod preferences;
pub mod primal;
pub mod report;
pub mod stability;
pub mod tree;

pub use error::{Error, Result};
