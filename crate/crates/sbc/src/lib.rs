//! Structured Bayesian compression for small neural networks.
//!
//! Trains dense/conv networks under a learnable mixture of scale-mixture-of-
//! normals shrinkage priors with group (per-unit) and block (overlapping
//! cluster) structure, then prunes, quantizes, serializes and benchmarks the
//! compressed model.

pub mod blocks;
pub mod compress;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod priors;
pub mod tensor;
pub mod train;

pub use error::{Result, SbcError};
pub use tensor::{Graph, NodeId, Tensor};

#[cfg(test)]
pub(crate) mod testsupport;
