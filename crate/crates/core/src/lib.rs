//! Variational predictive coding for self-supervised speech representations.
//!
//! The crate covers the full pipeline at desk scale: log-Mel feature
//! extraction, a synthetic HMM corpus with ground-truth labels, k-means and
//! soft-min quantization, span masking and future partitions, a small Pre-LN
//! Transformer encoder, the masked/future/contrastive objectives and their
//! expectation estimators, training loops with checkpoints, and linear probes.

pub mod cache;
pub mod codebook;
pub mod diagnostics;
pub mod error;
pub mod encoder;
pub mod features;
pub mod numerics;
pub mod objectives;
pub mod partition;
pub mod probe;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
