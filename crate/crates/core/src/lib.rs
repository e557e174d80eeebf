//! Score-based diffusion models over precomputed representation vectors.
//!
//! Train a score network with denoising score matching, integrate the
//! probability flow ODE for exact per-sample log-likelihoods, and threshold
//! those likelihoods for out-of-distribution detection.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod io;
pub mod likelihood;
pub mod ode;
pub mod score_net;
pub mod sde;
pub mod seed;
pub mod toy2d;
pub mod trainer;

pub use error::{Error, Result};
