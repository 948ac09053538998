//! Method configurations, the Monte-Carlo action shield and the experiment suite.

mod methods;
pub mod shield;
pub mod suite;

pub use methods::{local_default_regions, MethodConfig, MethodId, PolicyShape};
