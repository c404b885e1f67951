//! Persistent message passing over persistent segment trees.
//!
//! The crate bundles a versioned segment tree that answers historical
//! range-minimum queries, a generator for supervised rollouts over it, a
//! small reverse-mode autodiff engine, the PMP model with its overwriting
//! baselines, and the training and evaluation harness.

pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod diff;
mod error;
pub mod eval;
pub mod model;
pub mod pst;
pub mod train;

pub use error::{Error, Result};
