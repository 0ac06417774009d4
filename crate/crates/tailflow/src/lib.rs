//! Normalizing flows whose base distribution adapts to the tails of each
//! data marginal.
//!
//! The crate provides the full pipeline for density estimation on data with
//! mixed light- and heavy-tailed coordinates:
//!
//! - [`tail`] — tail-index estimation (Hill and moments estimators) and a
//!   per-marginal light/heavy classifier that drives model construction;
//! - [`dist`] — Normal and Student-t base marginals with trainable degrees
//!   of freedom, assembled into mixed base distributions;
//! - [`layers`] — masked autoregressive transforms (affine and rational-
//!   quadratic spline), group-restricted permutations, and LU-parameterized
//!   linear maps with a block structure that cannot mix heavy tails into
//!   light coordinates;
//! - [`model`] — flow assembly, exact log-density, sampling, checkpointing;
//! - [`train`] — maximum-likelihood fitting with Adam and decoupled weight
//!   decay;
//! - [`synth`] — Gaussian-copula synthetic targets with known marginals and
//!   exact log-density, for controlled experiments;
//! - [`metrics`] — tail-focused evaluation: tail value-at-risk gaps, log-log
//!   survival-curve area, and tail-class confusion matrices;
//! - [`ad`] — the reverse-mode autodiff engine everything trains through.
//!
//! The usual flow: classify marginals with [`tail::build_tail_report`], build
//! a model with [`model::build_model`], fit it with [`train::fit`], then
//! score samples with [`metrics`].

pub mod ad;
pub mod dist;
pub mod error;
pub mod layers;
pub mod math;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tail;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
