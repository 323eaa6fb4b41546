//! Masked pre-training (MPT) scores as estimators of the log-marginal
//! likelihood (LML) of latent-variable models.
//!
//! The crate is organised bottom-up:
//!
//! - [`gaussian`]: dense multivariate-Gaussian joints, log-densities and
//!   block conditionals (the self-predictive conditionals of PPCA).
//! - [`masking`]: mask sampling, exhaustive enumeration and counting.
//! - [`ppca`]: probabilistic PCA parameters, data generation, exact LML and
//!   analytic gradients of the LML and of masked conditional objectives.
//! - [`scoring`]: the per-size score function, the cumulative MPT estimator,
//!   its exhaustive counterpart, the fixed-rate loss and its bias, and MPT
//!   curves with their areas.
//! - [`training`]: stochastic-gradient training of PPCA on MPT objectives.
//! - [`bernoulli`]: a linear latent model with Bernoulli likelihood whose
//!   LML and conditionals come from grid quadrature over a 2-D latent space,
//!   with an ELBO baseline.
//!
//! Everything that draws random numbers takes an [`rng::RngKey`]: a
//! counter-based stream key, so any draw can be reproduced independently of
//! evaluation order or worker count.

pub mod bernoulli;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod masking;
pub mod optim;
pub mod par;
pub mod ppca;
pub mod rng;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
