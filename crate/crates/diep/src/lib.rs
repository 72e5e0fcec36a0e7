//! A desk-scale laboratory for differentiable expert pruning of toy
//! mixture-of-experts models.
//!
//! The crate builds and pretrains small MoE classifiers on synthetic
//! per-token tasks, learns intra-layer (alpha) and inter-layer (beta)
//! importance scores by alternating gradient descent on a
//! reconstruction-regularized objective, converts the learned scores into a
//! globally ranked non-uniform pruning mask, and runs pruned inference with
//! CKA-driven adaptive expert skipping. Every numeric path is validated
//! against brute-force oracles and planted ground truth.

pub mod cka;
pub mod error;
pub mod harness;
pub mod moe;
pub mod pruning;
pub mod search;
pub mod skip;
pub mod synth;
pub mod tensor;

pub use error::{DiepError, Result};
