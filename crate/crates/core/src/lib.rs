//! Information flow in variance-preserving diffusion models.
//!
//! The crate trains small entropy-matching diffusion models on synthetic
//! data and measures what they store: total and neural entropy, mutual
//! information between signal and condition, total correlation and per-point
//! log densities. Every estimator can be run against the closed-form scores
//! of a linear joint-Gaussian model ([`gaussian`]), which serves as the exact
//! reference.
//!
//! | module | contents |
//! |--------|----------|
//! | [`gaussian`] | joint-Gaussian oracle, KL, total correlation |
//! | [`diffusion`] | VP schedule, perturbation kernel, analytic diffused scores |
//! | [`sampler`] | forward/reverse SDE and guided probability-flow ODE |
//! | [`nn`] | MLP with time/condition embeddings, backprop, Adam |
//! | [`training`] | denoising entropy-matching objective and training loop |
//! | [`estimators`] | entropy, neural entropy, MINDE, log-density estimators |
//! | [`kelly`] | proportional betting with side information |

pub mod diffusion;
pub mod error;
pub mod estimators;
pub mod gaussian;
pub mod kelly;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
