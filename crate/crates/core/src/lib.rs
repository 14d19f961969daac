//! Simulation of federated averaging with hypergradient learning-rate
//! schedulers on synthetic non-IID data.

pub mod analysis;
pub mod cli;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod models;
pub mod schedulers;
pub mod vecmath;

pub use engine::{run_experiment, ExperimentConfig, GlobalScheduler, LocalScheduler, ModelKind, Simulation};
pub use error::{Error, Result};
pub use metrics::MetricsRecord;
pub use vecmath::ParamVector;
