//! Multi-label smoke/fire image classification pipeline.
//!
//! The crate bundles everything needed to run the two-stage training scheme
//! end to end on a workstation:
//!
//! * [`corpus`] — manifest handling, stratified splitting, and a synthetic
//!   corpus generator for repeatable experiments.
//! * [`imageops`] — bilinear resize, stitching primitives, normalization, and
//!   the stochastic photometric/geometric augment stack.
//! * [`splice`] — the random-splicing augmentation that pairs a positive
//!   image with simple negatives along a random side.
//! * [`backend`] — a small convolutional classifier (GAP + two-logit head)
//!   with exact backpropagation, SGD, and binary checkpoints.
//! * [`cam`] — class activation maps, trusted-region extraction, and heatmap
//!   overlays.
//! * [`selflearn`] — the iterative loop that alternates CAM-driven
//!   augmentation with retraining until validation loss stops improving.
//! * [`eval`] — TPR/FPR at a fixed threshold and rank-statistic ROC-AUC.
//!
//! All randomness flows through [`rng`], which derives an independent ChaCha
//! stream per (seed, purpose, round, epoch, sample) so results are replayable
//! and independent of scheduling.

pub mod backend;
pub mod cam;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod imageops;
pub mod rng;
pub mod selflearn;
pub mod splice;

pub use error::{Error, Result};
