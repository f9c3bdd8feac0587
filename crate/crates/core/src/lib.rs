//! Bounded jump BSDEs on exact scenario lattices.
//!
//! A [`LatticeModel`] carries a Bernoulli Brownian driver crossed with a
//! finite-mark jump process. On it the crate solves BSDEs with jumps
//! (Picard, optionally truncated), exponential utility maximization with a
//! liability, utility indifference values and hedges, and the small
//! risk-aversion limit. Brute-force oracles in [`oracles`] solve the same
//! problems by direct optimization for cross-checking.

pub mod bsde;
pub mod claim;
pub mod config;
pub mod error;
pub mod export;
pub mod field;
pub mod generator;
pub mod indifference;
pub mod lattice;
pub mod measure;
pub mod oracles;
pub mod paths;
pub mod stability;
pub mod truncation;
pub mod utility;
pub mod validate;
pub mod verify;

pub use bsde::{solve_bsde, BsdeSolution, SolverOptions};
pub use claim::Claim;
pub use config::{Document, SolveMode};
pub use error::{Error, NodeId, Result};
pub use field::NodeField;
pub use generator::GeneratorSpec;
pub use lattice::{LatticeModel, MarkSpace, StrategyField, TimeGrid};
pub use measure::{MeasureChange, MeasureLabel};
pub use truncation::TruncationProfile;
pub use utility::{solve_utility, UtilityResult};
