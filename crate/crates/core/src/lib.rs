//! Switching nonlinear dynamical systems: joint training of generative and
//! amortized inference networks with exact marginalization of the discrete
//! switching states, plus dataset generators, segmentation metrics, and a
//! Gumbel-Softmax baseline.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`nn`]: tensors, reverse-mode differentiation, MLP/GRU blocks,
//!   parameter storage and checkpointing.
//! - [`hmm`]: log-space forward-backward, smoothed marginals, the collapsed
//!   surrogate objective, and the posterior-uniformity regularizer.
//! - [`model`]: the generative model (emission, per-state continuous
//!   transitions, observation-conditioned discrete transitions).
//! - [`inference`]: bidirectional encoder and causal Gaussian posterior with
//!   reparameterized sampling.
//! - [`train`]: the regularized objective, annealing schedules, Adam, the
//!   training loops for the marginalized model and the Gumbel-Softmax
//!   baseline.
//! - [`data`]: seeded bouncing-ball and planar-vehicle generators with
//!   ground-truth regime labels, and the dataset container format.
//! - [`eval`]: regime decoding, label alignment, frame and switching-point
//!   F1 scores, and the transition-weight correlation diagnostic.

pub mod data;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod inference;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
