//! Gaussian approximation of density-dependent Markov chains.

// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod experiments;
pub mod kmt;
pub mod model;
pub mod report;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
pub use model::Model;
