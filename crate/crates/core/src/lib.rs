//! Adversarial training on pruned, weighted training subsets.
//!
//! The crate bundles a small reverse-mode autodiff core, two model
//! families, PGD/FGSM attacks, TRADES and MART losses, adversarial subset
//! selectors (GLISTER and GRAD-MATCH variants), per-example attack budgets
//! and the training loop that ties them together.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod bullet;
pub mod data;
pub mod diffcore;
mod error;
pub mod losses;
pub mod models;
pub mod rng;
pub mod selection;
pub mod trainer;

pub use error::{Error, Result};
