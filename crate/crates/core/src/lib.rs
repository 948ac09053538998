//! Replay-suppression experiments on graph diffusion with delayed harm.

pub mod baselines;
pub mod config;
pub mod deformation;
pub mod env;
pub mod error;
pub mod fields;
pub mod graph;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod rsd;
pub mod stats;
pub mod trainer;
pub mod verification;
pub mod world;

pub use error::{Error, Result};
