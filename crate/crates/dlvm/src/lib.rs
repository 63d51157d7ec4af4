//! Deep latent variable models with exact-likelihood tooling.
//!
//! The crate trains small variational autoencoders from scratch (its own
//! tensors, reverse-mode tape, Adam), demonstrates likelihood blow-up for
//! unconstrained Gaussian decoders, enforces the spectral covariance
//! constraint that restores a bounded likelihood, computes finite-mixture
//! upper bounds that sandwich the exact likelihood together with the ELBO,
//! and performs missing-data imputation with both pseudo-Gibbs and
//! Metropolis-within-Gibbs samplers.
//!
//! Heavy loops are data-parallel via rayon; build with
//! `--no-default-features` for a fully sequential binary. Both modes produce
//! bit-identical numbers.

// index loops over matrices and index-aligned slices are this crate's idiom
#![allow(clippy::needless_range_loop)]

pub mod blowup;
pub mod data;
pub mod distributions;
pub mod error;
pub mod exec;
pub mod imputation;
pub mod mc;
pub mod mixture;
pub mod model;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
