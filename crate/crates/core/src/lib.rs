//! Neural block linearization toolkit.
//!
//! Replaces attention sublayers of a pre-norm decoder-only transformer with
//! closed-form affine maps `Y ≈ W·X + b`, ranks candidate layers with a bound
//! built from canonical correlations, and models the prefill / KV-cache
//! savings analytically.
//!
//! The pipeline, bottom-up:
//!
//! * [`activation_io`] reads and writes per-layer activation dumps (`.nbla`).
//! * [`stats`] accumulates means and (cross-)covariances in 64-bit floats.
//! * [`spectral`] holds the symmetric eigensolver and inverse square roots.
//! * [`cca`] computes canonical correlations, the NMSE bound and exact NMSE.
//! * [`lmmse`] fits the linear substitute and checks its optimality.
//! * [`ranking`] scores layers and builds substitution plans.
//! * [`toymodel`] is a small deterministic transformer to calibrate against.
//! * [`costmodel`] reproduces prefill and KV-cache arithmetic.
//! * [`cli`] drives the whole thing from the command line.

pub mod activation_io;
pub mod calibration;
pub mod cca;
pub mod cli;
pub mod costmodel;
pub mod error;
pub mod lmmse;
pub mod ranking;
pub mod spectral;
pub mod stats;
pub mod toymodel;

pub use activation_io::{read_dump, write_dump, ActivationMatrix, DumpHeader, Role};
pub use cca::{
    canonical_correlations, cca_nmse_bound, cosine_distance_score, direct_nmse,
    standardized_cross_correlation, CcaSpectrum, CosineAccumulator,
};
pub use costmodel::InferenceProfile;
pub use error::{NblError, Result};
pub use lmmse::{fit_lmmse, orthogonality_residual, LinearMap};
pub use ranking::{Criterion, LayerScore, SelectionPlan, Strategy};
pub use spectral::Regularization;
pub use stats::{CovarianceSet, MomentAccumulator};
pub use toymodel::{ToyConfig, ToyTransformer};
