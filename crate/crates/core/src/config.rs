//! JSON configuration documents.
//!
//! A document has four blocks: `model` (the lattice), `claim` (the terminal
//! liability), `solver` (tolerances and mode) and `experiment` (risk
//! aversion, wealth, sweep grids). Only `schema_version` and `model` are
//! mandatory. See `docs/config-schema.md` for the field reference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Default maximum node count accepted by the lattice builder.
pub const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

/// A coefficient that is either the same at every node or selected by the
/// current regime state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient<T> {
    Constant(T),
    PerRegime(Vec<T>),
}

impl<T> Coefficient<T> {
    pub fn at_regime(&self, regime: usize) -> &T {
        match self {
            Coefficient::Constant(v) => v,
            Coefficient::PerRegime(vs) => &vs[regime % vs.len()],
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Coefficient::Constant(_))
    }

    pub fn values(&self) -> Vec<&T> {
        match self {
            Coefficient::Constant(v) => vec![v],
            Coefficient::PerRegime(vs) => vs.iter().collect(),
        }
    }
}

/// Compensator density ζ(node, mark).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensitySpec {
    /// ζ_j constant over the lattice.
    Constant(Vec<f64>),
    /// ζ_j selected by the regime state.
    PerRegime(Vec<Vec<f64>>),
    /// ζ_j = min(base_j + excitation_j * (jumps so far), cap).
    SelfExciting {
        base: Vec<f64>,
        excitation: Vec<f64>,
        cap: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkConfig {
    /// Mark vector e_j (nonzero).
    pub value: Vec<f64>,
    /// Mass λ_j of the mark measure.
    pub weight: f64,
    /// Regime states advanced by one jump of this mark (modulo the number of regimes).
    #[serde(default = "one")]
    pub regime_shift: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub horizon: f64,
    pub steps: usize,
    /// Initial asset prices; its length fixes the Brownian dimension d.
    pub s0: Vec<f64>,
    /// Market price of risk φ (length d).
    pub phi: Coefficient<Vec<f64>>,
    /// Volatility matrix σ (d×d, row-major as nested arrays).
    pub sigma: Coefficient<Vec<Vec<f64>>>,
    #[serde(default)]
    pub marks: Vec<MarkConfig>,
    #[serde(default)]
    pub intensity: Option<IntensitySpec>,
    /// Number of regime states; 1 means no regime switching.
    #[serde(default = "one")]
    pub regimes: usize,
    #[serde(default)]
    pub initial_regime: usize,
    /// Merge nodes with equal (up-move counts, jump counts). Requires
    /// constant φ and σ.
    #[serde(default)]
    pub recombine: bool,
    #[serde(default = "default_budget")]
    pub node_budget: u64,
}

fn default_budget() -> u64 {
    DEFAULT_NODE_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimConfig {
    /// Expression over terminal coordinates, e.g. `0.5 * (N >= 1)`.
    pub expr: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    /// BSDE generator evaluated on the extracted (Z, U).
    #[default]
    Euler,
    /// Exact one-step entropic recursion.
    DtConsistent,
}

impl std::str::FromStr for SolveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolveMode::Euler),
            "dt-consistent" => Ok(SolveMode::DtConsistent),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Zero,
    Affine {
        constant: f64,
        #[serde(default)]
        y: f64,
        #[serde(default)]
        z: Vec<f64>,
        #[serde(default)]
        u: Vec<f64>,
    },
    Entropic {
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub mode: SolveMode,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
}

fn default_tol() -> f64 {
    1e-12
}

fn default_max_iter() -> usize {
    200
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            mode: SolveMode::default(),
            truncated: false,
            generator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub wealth: f64,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_deltas")]
    pub stability_deltas: Vec<f64>,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_alpha_grid() -> Vec<f64> {
    vec![0.5, 0.25, 0.125, 0.0625]
}

fn default_deltas() -> Vec<f64> {
    vec![1e-2, 1e-3]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            wealth: 0.0,
            alpha_grid: default_alpha_grid(),
            stability_deltas: default_deltas(),
        }
    }
}

/// A complete configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelConfig,
    #[serde(default)]
    pub claim: Option<ClaimConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl Document {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported `schema_version` {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn claim_expr(&self) -> &str {
        self.claim.as_ref().map(|c| c.expr.as_str()).unwrap_or("0")
    }
}
