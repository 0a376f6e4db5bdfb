//! Experiment orchestration for coupled signal/logit diffusion: configs,
//! replicate seeding, the bundle cache, the method comparison, the three
//! ablations, the SDE demo and result persistence.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod results;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
