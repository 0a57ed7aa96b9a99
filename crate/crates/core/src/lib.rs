//! Multisample predictive risks for misspecified Bayesian models.
//!
//! The crate covers the full family of inferential and predictive risks:
//! the ELBO (PAC-inferential risk), the multisample PAC^m risk, the
//! second-order PAC2-T comparison objective and the IWAE bound. Around
//! them sit the pieces needed to study those risks numerically:
//!
//! - [`numerics`]: log-space reductions, the log-average-exp bound family,
//!   uniform grids and rectangle-rule quadrature.
//! - [`distributions`]: 1-D normals and mixtures, grid and atomic parameter
//!   distributions, mean-field Gaussians, KL divergences.
//! - [`objectives`]: scalar risk functionals over a [`objectives::LogLikMatrix`],
//!   the gap Δ, ψ estimates and bounds, true risks on the toy model.
//! - [`autodiff`]: a reverse-mode tape over 2-D arrays with stop-gradient.
//! - [`models`]: MLP likelihoods, variational posteriors over weights,
//!   differentiable losses and optimizers.
//! - [`toy_solver`]: conjugate posterior, grid fixed-point minimizer,
//!   atomic empirical-predictive minimizer and the analytic optima.
//! - [`theory_checks`]: numerical falsification harnesses for the bound chain
//!   and the supporting inequalities.
//!
//! All risks are in nats. Conversion to bits happens at reporting time only.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod distributions;
mod error;
pub mod models;
pub mod numerics;
pub mod objectives;
pub mod theory_checks;
pub mod toy_solver;

pub use error::{Error, Result};

/// Seeded random stream used everywhere randomness is needed.
///
/// ChaCha8 is portable and version-stable, so a seed replays the same draws
/// on every platform.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's random stream from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Converts nats to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}
