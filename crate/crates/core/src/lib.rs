//! HSVLT: a hierarchical joint vision-language encoder for multi-label image
//! classification, built on a small reverse-mode tensor engine.
//!
//! Module map:
//! - [`tensor`]: dense tensors, differentiable primitives, finite-difference checks
//! - [`ivla`]: interactive visual-linguistic attention
//! - [`encoder`]: four-stage encoder with interaction blocks
//! - [`aggregation`]: cross-scale aggregation, Hamburger/NMF head, cost counting
//! - [`metrics`]: AP, mAP and the precision/recall/F1 suite
//! - [`harness`]: synthetic data, training, evaluation, checkpoints, ablations

pub mod aggregation;
pub mod config;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod ivla;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
