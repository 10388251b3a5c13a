//! Denoiser-covariance estimation and reconstruction guidance for diffusion
//! posterior sampling, with closed-form Gaussian-mixture oracles, reverse-time
//! samplers, and the synthetic experiment runners behind the `fh` CLI.

// `!(x > 0.0)` is used instead of `x <= 0.0` throughout: the negated form
// also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dct;
pub mod error;
pub mod experiments;
pub mod guidance;
mod linalg;
pub mod matrix;
pub mod metrics;
pub mod mixture;
pub mod report;
pub mod sampler;
pub mod tracker;

pub use error::{FhError, Result};
