//! Plate-amortized variational inference for plate-enriched hierarchical
//! Bayesian models.

pub mod diff;
pub mod dist;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod family;
pub mod flows;
pub mod model;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
