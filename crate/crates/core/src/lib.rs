//! Kernel density discrimination for adversarial learning.
//!
//! The discriminator is a feature map `phi`; real and generated batches are
//! turned into kernel density estimates in feature space, and both players
//! optimize hinged log-likelihood ratios of those estimates. This crate holds
//! the numeric substrate, the KDEs and their gradients, every loss, small
//! MLP models, a toy training loop, desk-scale metrics and the experiment
//! drivers used by the `kdd` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod kde;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod plot;
pub mod trainer;

pub use error::{Error, Result};
pub use kde::{AnchorSet, KernelSpec, Origin};
pub use losses::{LossResult, LossWeights};
pub use numerics::{Matrix, Rng};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kernel-densities.md")]
    mod kernel_densities {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
