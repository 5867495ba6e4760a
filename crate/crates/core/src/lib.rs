//! Hierarchical Discrete Gaussian model: renormalization-group flow, exact sampling,
//! the coupling to the Gaussian free field, and extreme-value experiments.

pub mod coupling;
pub mod error;
pub mod extremes;
pub mod harness;
pub mod model;
pub mod rg;
pub mod sampler;
pub mod stats;

pub use error::{Error, Result};
pub use model::{ModelParams, Regime, Vertex};
pub use rg::{CoefficientVector, PotentialTable};
