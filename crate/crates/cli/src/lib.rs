//! Experiment orchestration for `fairicl`: configuration, content-addressed
//! pipeline stages, parameter sweeps and a local completions server.

pub mod config;
pub mod corpus;
pub mod error;
pub mod pipeline;
pub mod serve;
pub mod store;
pub mod sweep;
pub mod synthetic;

pub use config::ExperimentConfig;
pub use error::{PipelineError, Result};
pub use pipeline::{Pipeline, Policy};
