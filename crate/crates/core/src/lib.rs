//! Nonparametric maximum likelihood estimation of the joint distribution of
//! random parameters `(q1, q2)` in a Galerkin-discretized diffusion model of
//! transdermal alcohol transport.
//!
//! The pipeline is:
//!
//! 1. [`episode`]: ingest and resample BrAC/TAC drinking episodes.
//! 2. [`model`] and [`expm`]: assemble the linear-spline Galerkin system and
//!    discretize it exactly under a zero-order hold.
//! 3. [`sim`]: run the discrete-time system.
//! 4. [`likelihood`]: per-episode, per-node Gaussian log-likelihoods.
//! 5. [`mle`]: maximize the mixture log-likelihood over simplex weights.
//! 6. [`distribution`]: grid measures, cdfs, sampling, moments, distances.
//! 7. [`synthetic`] and [`cv`]: simulated datasets and leave-one-out
//!    uncertainty quantification.
//! 8. [`cli`]: file-based workflows behind the `tac-npml` binary.

pub mod cli;
pub mod cv;
pub mod distribution;
pub mod episode;
pub mod error;
pub mod expm;
pub mod likelihood;
pub mod mle;
pub mod model;
pub mod rng;
pub mod sim;
pub mod synthetic;

pub use error::{Error, Result};
