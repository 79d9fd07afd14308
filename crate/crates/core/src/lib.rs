//! Variance-reduction laboratory for masked-diffusion training.
//!
//! The crate pairs a tiny masked-token denoiser with every loss-estimator
//! ingredient needed to study training variance: masking-rate samplers,
//! mask-pattern samplers, a three-way variance decomposition, fitted
//! importance samplers, control variates, and a two-group token model for
//! checking eligibility-set variance claims in closed form.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod lab;
pub mod masking;
pub mod plot;
pub mod ppots;
pub mod rng;
pub mod stats;
pub mod syrm_lab;
pub mod trainer;
pub mod tsampler;
pub mod variance;

pub use error::{LabError, Result};
pub use rng::RngStream;
