//! Robust Bayesian inference with a mixture of Gaussian and Student's-t
//! measurement errors.
//!
//! Any Gaussian-error Gibbs sampler can be converted to the mixture error by
//! inflating each known measurement variance `V_i` to `alpha_i^{z_i} V_i`, where
//! `z_i` is a latent outlier indicator and `alpha_i` an inverse-gamma variance
//! inflation. The extra latent variables are refreshed at the end of every
//! iteration of the original sampler.
//!
//! The crate ships two host models:
//!
//! * [`hier`]: a two-level Gaussian hierarchical (random effects) model;
//! * [`ou`]: a state-space model whose latent curve is an Ornstein-Uhlenbeck
//!   process observed at irregular times;
//!
//! plus the one-parameter location model in [`location_toy`], whose marginal
//! posteriors are available in closed form and serve as an oracle for the
//! samplers.

pub mod diagnostics;
pub mod dists;
pub mod engine;
mod error;
pub mod hier;
pub mod io;
pub mod location_toy;
pub mod mixture;
mod optim;
pub mod ou;
pub mod protocols;

pub use error::{Error, Result};
