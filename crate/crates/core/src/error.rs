use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Position of a node in the lattice: time slice and index within the slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId {
    pub slice: usize,
    pub index: usize,
}

impl NodeId {
    pub fn new(slice: usize, index: usize) -> Self {
        Self { slice, index }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.slice, self.index)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("step-size violation at node {node}: {what} (value {value:.6e}, bound {bound:.6e})")]
    StepSize {
        node: NodeId,
        what: &'static str,
        value: f64,
        bound: f64,
    },

    #[error("singular volatility matrix at node {0}")]
    Singular(NodeId),

    #[error("lattice has {nodes} nodes, node budget is {budget}")]
    Budget { nodes: u128, budget: u128 },

    #[error("model validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("exponential overflow at node {node}: |alpha*u| = {value:.3e} exceeds 700")]
    Overflow { node: NodeId, value: f64 },

    #[error("Picard iteration did not converge at node {node}: last iterates {last:.15e}, {previous:.15e}")]
    PicardNonConvergence { node: NodeId, last: f64, previous: f64 },

    #[error("truncation bound violated at node {node}: |Y| = {value:.15e} > b(t) = {bound:.15e}")]
    BoundViolation { node: NodeId, value: f64, bound: f64 },

    #[error("generator has no linear-growth constants (K1, K2); truncation is undefined")]
    MissingGrowthConstants,

    #[error("solutions live on different lattices")]
    LatticeMismatch,

    #[error("operation requires a non-recombining tree lattice")]
    NotATree,

    #[error("stopping rule is not node-measurable: {0}")]
    NotAStoppingRule(String),

    #[error("empty risk-aversion grid")]
    EmptyGrid,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimizer stalled at node {node}: gradient norm {gradient:.3e}")]
    OptimizerStall { node: NodeId, gradient: f64 },

    #[error("claim expression error: {0}")]
    Claim(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
