//! Configuration, dataset files, synthetic data and experiment orchestration
//! for `advprune-core`.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod report;
pub mod toy;

pub use error::{HarnessError, Result};
