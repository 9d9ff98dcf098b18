//! Traversability-aware multi-trajectory generation.
//!
//! The crate builds synthetic 2D worlds with a forward range sensor, computes
//! A* ground-truth trajectory fans, trains an attention-enhanced conditional
//! VAE (and its baselines) that turns one observation into K candidate
//! trajectories, and scores the result with non-traversable, coverage and
//! diversity rates.

pub mod error;
pub mod cli;
pub mod env;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
