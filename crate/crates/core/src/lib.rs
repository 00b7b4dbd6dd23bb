//! Concept-based classification on a variational autoencoder with a
//! class-conditional Gaussian-mixture prior.
//!
//! The crate is split by concern:
//!
//! * [`tensor`] dense `f64` arrays with reverse-mode differentiation.
//! * [`nn`] MLPs, Adam, learning-rate schedules, early stopping, checkpoints.
//! * [`model`] the concept model: encoder, decoder, linear concept classifier,
//!   per-class prior prototypes, training objective, explanations.
//! * [`train`] minibatch training loop shared by every experiment.
//! * [`osr`] open-set rejection via reconstruction and prototype-distance checks.
//! * [`metrics`] DCI alignment/completeness/explicitness, leakage, probes, PCA.
//! * [`data`] MNIST IDX ingestion, a synthetic sprite renderer, and task builders.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod osr;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
