//! Complementary visual-linguistic (CVL) network for binary meme
//! classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`engine`]: reverse-mode autodiff over `f64` tensors.
//! - [`representation`]: tokenization, keyword channel, and the fused visual
//!   and linguistic input embeddings.
//! - [`encoders`]: single-stream (self-attention over text+regions) and
//!   dual-stream (per-modality self-attention plus co-attention) encoders.
//! - [`model`]: both streams, three unshared classification heads, loss, and
//!   checkpoints.
//! - [`training`]: Adam, warmup/decay schedule, same-label augmentation, and
//!   the training loop.
//! - [`evaluation`]: accuracy, AUROC, and average-decision ensembling.
//! - [`data`]: dataset, feature-container and keyword-file I/O, and the
//!   synthetic XOR benchmark generator.
//! - [`cli`]: the `cvl` command-line surface.

pub mod cli;
pub mod data;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod model;
pub mod representation;
pub mod training;

pub use error::{Error, Result};
