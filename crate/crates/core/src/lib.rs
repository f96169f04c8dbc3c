//! Discrete diffusion over vector-quantized token grids.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedules`]: cumulative and stepwise mask+uniform noise schedules, including the
//!   per-codebook "easy-first" schedule.
//! - [`transitions`]: exact categorical transition matrices, closed-form marginals,
//!   stationary distribution and true posteriors, plus a brute-force matrix-product oracle.
//! - [`diffusion`]: forward corruption, guided reverse sampling, the variational bound and
//!   tabular denoiser training, with an exact-Bayes denoiser for verification.
//! - [`codec`]: flat, residual, group and group-residual vector quantization with k-means
//!   codebook fitting.
//! - [`metrics`]: MCD, SSIM and the GPE/VDE/FFE pitch-error family.
//! - [`auxiliary`]: InfoNCE, contrastive ranking loss, recall@k and the CLUB estimator.
//! - [`cli`]: the `tokendiff` command-line surface.

pub mod auxiliary;
pub mod cli;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod schedules;
pub mod selftest;
pub mod transitions;

pub use error::{Error, Result};
