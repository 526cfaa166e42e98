//! Fair demonstration selection for in-context learning on tabular data.
//!
//! The pipeline decorrelates the sensitive attribute from the label with
//! hierarchical synthetic sampling, learns a soft-prompt concept against a
//! frozen causal LM, ranks training examples by how likely they make that
//! concept, and draws demonstrations from the top of the ranking.

pub mod augment;
pub mod concept;
pub mod data;
pub mod error;
pub mod inference;
pub mod lm;
pub mod metrics;
pub mod seed;
pub mod serialize;

pub use error::{Error, Result};
