//! Benchmark engine for semantic-segmentation attribution maps.
//!
//! Four attribution methods (gradient-pooled, elementwise-gradient,
//! region-intervention and their dual-evidence fusion) are scored with
//! intervention-based faithfulness, off-target leakage, perturbation
//! robustness and runtime metrics. A deterministic micro segmentation
//! network with exact gradients ships in [`model`] so the whole pipeline can
//! be verified without external weights; real models plug in through the
//! [`bridge`] process protocol.

pub mod attribution;
pub mod bridge;
pub mod cli;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
