//! Class-balancing regularizer for GANs trained on long-tailed data, with a
//! small-scale experiment harness.
//!
//! The pieces, bottom up:
//!
//! - [`diffkernel`]: a reverse-mode autodiff graph over dense `f64` tensors.
//! - [`nn`]: multilayer perceptrons, Adam and parameter EMA on top of it.
//! - [`data`]: long-tailed Gaussian mixtures on a circle.
//! - [`stats`]: effective class statistics with exponential forgetting.
//! - [`regularizer`]: the weighted-entropy penalty on mean classifier softmax.
//! - [`theory`]: closed-form optimum of the penalty and an independent checker.
//! - [`trainer`]: the relativistic GAN loop with the classifier in the loop.
//! - [`metrics`]: KL to uniform, Fréchet distance, classifier accuracy score.
//! - [`harness`]: configs, CSV/SVG output and the experiment drivers.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diffkernel;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod regularizer;
pub mod stats;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
