//! Self-supervised representation learning for high-content screening
//! wells, built around cross-well aligned masked siamese training.
//!
//! The crate is organized as a pipeline:
//!
//! - [`ndtensor`]: dense tensors, reverse-mode autodiff, AdamW.
//! - [`hcsdata`]: the batch/plate/well data model, on-disk dataset format,
//!   and a synthetic generator with controllable batch effects.
//! - [`wellsampler`]: cross-well pair sampling, multi-view augmentation,
//!   patchification and masking.
//! - [`vitencoder`]: a vision-transformer encoder and projection head.
//! - [`msnloss`]: prototype bank, similarity assignments, the alignment
//!   loss with mean-entropy regularization, and EMA target updates.
//! - [`trainloop`]: schedules, the training loop, checkpoints, and
//!   embedding extraction.
//! - [`retrieval`]: relationship-retrieval benchmarks (recall, AUC, AP,
//!   permutation z-scores).

pub mod hcsdata;
pub mod msnloss;
pub mod ndtensor;
pub mod retrieval;
pub mod streams;
pub mod trainloop;
pub mod vitencoder;
pub mod wellsampler;

pub use ndtensor::{Tape, Tensor, TensorError, ValueId};
