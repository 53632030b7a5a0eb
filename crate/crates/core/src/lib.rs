//! Fairness regularization terms for training probabilistic binary
//! classifiers.
//!
//! Fairness notions are expressed as linear-fractional group statistics
//! ([`statistics`]). Two families of regularizers are built on top of them:
//! penalties on the per-group violation vector ([`fairret::violation`]) and
//! the divergence cost of projecting the classifier onto the set of fair
//! score vectors ([`fairret::projection`]). Everything is differentiable
//! through the small reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod batch;
pub mod data;
mod error;
pub mod fairret;
pub mod harness;
pub mod model;
pub mod statistics;

pub use batch::SampleBatch;
pub use error::{Error, Result};
