//! Compositional score-based sampling over a view × frame matrix of latent
//! vectors.
//!
//! A "row" estimator (one view, all frames) and a "column" estimator (one
//! frame, all views) are fused into a direction field for the whole matrix
//! and integrated with a probability-flow ODE Euler sampler, optionally with
//! rollback re-noising in the first steps. Exact Gaussian and Gaussian
//! mixture models provide closed-form scores so every piece can be checked
//! against ground truth.
//!
//! Module map:
//! - [`schedule`]: noise levels and the forward perturbation kernel
//! - [`rng`]: counter-addressed random streams
//! - [`models`]: Gaussian, mixture, and pivot-rooted matrix models
//! - [`denoise`]: the [`denoise::Denoiser`] trait and analytic denoisers
//! - [`compose`]: score composition and the latent matrix
//! - [`sampler`]: PF-ODE sampling and the rollback sampler
//! - [`harness`]: experiment configs, scenarios, statistics, and reports

pub mod compose;
pub mod denoise;
pub mod error;
pub mod harness;
pub mod models;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
