//! Weakly-supervised point-cloud segmentation workbench built around a
//! pseudo-label loss that combines entropy regularization with a
//! distribution-alignment divergence.
//!
//! The crate is organized along the data path:
//!
//! - [`losses`] — the per-point loss family and its closed-form score-space
//!   gradients for both the pseudo-label and the prediction branch;
//! - [`pseudo`] — class prototypes, cosine scoring, and label selection;
//! - [`network`] — plain MLP forward/backward and k-NN mean aggregation;
//! - [`data`] — synthetic blob scenes, weak-label masks, and their file forms;
//! - [`train`] — the two-branch training loop, checkpoints, and evaluation;
//! - [`eval`] — confusion metrics and binary gradient-field grids;
//! - [`gradcheck`] — finite-difference audits of every analytic gradient;
//! - [`experiment`] — the standard synthetic benchmark and sweep cells.
//!
//! Everything is `f64`, information quantities are in nats, and all
//! randomness flows through seeded ChaCha streams so identical inputs give
//! bit-identical outputs within one build.

pub mod data;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod pseudo;
pub mod train;
