//! Fairness diagnostics on binary classifiers via the per-group confusion
//! tensor: gap evaluation, feasibility checks, accuracy-fairness tradeoff
//! sweeps, and mixing-rate post-processing.

pub mod data;
pub mod defs;
pub mod error;
pub mod frontier;
pub mod incompat;
pub mod lafop;
pub mod postprocess;
pub mod solver;
pub mod tensor;

pub use error::{FactError, Result};
