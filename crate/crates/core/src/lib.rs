//! Heavy-tailed spectral analysis of model weight matrices and layer-wise
//! compression budgets derived from it.
//!
//! The pipeline is:
//!
//! 1. [`tensorio`] loads a checkpoint and groups its 2-D tensors into
//!    transformer blocks.
//! 2. [`spectral`] computes each matrix's eigenvalue spectrum and fits a
//!    power-law tail exponent with the Hill estimator.
//! 3. [`metrics`] turns spectra into shape/scale metrics and block qualities.
//! 4. [`allocation`] maps qualities to per-layer sparsity, N:M, bit-width or
//!    rank budgets under a global constraint.
//! 5. [`compression`] applies a plan to the checkpoint.
//!
//! [`synthlab`] holds synthetic-spectrum experiments used to sanity-check
//! the estimator and the rank/tail relationship.

pub mod allocation;
pub mod compression;
pub mod error;
pub mod metrics;
pub mod spectral;
pub mod synthlab;
pub mod tensorio;

pub use error::{Error, Result};
