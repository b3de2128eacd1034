//! Cross-task contrastive regularization (CCR) for multi-task dense
//! prediction, end to end and in plain Rust.
//!
//! The crate is a desk-scale laboratory rather than a framework binding.
//! Everything sits on a small reverse-mode autodiff core over `f64`
//! tensors ([`tensor`]), on top of which live a toy encoder-decoder
//! multi-task network ([`nets`]), the contrastive mechanism itself
//! ([`ccr`]): anchor sampling, label partitions, semi-hard triplet
//! mining, shared projector heads and the hinge regularizer, the task
//! definitions and evaluation metrics ([`tasks`]), a synthetic
//! correlated-task scene generator with a tiny tensor file format
//! ([`data`]), and a train/eval/analysis harness ([`harness`]) behind a
//! CLI ([`cli`]).
//!
//! Determinism is a design constraint throughout: a fixed seed fixes the
//! dataset, the initialization, the shuffles, the mined triplets and the
//! final checkpoint, bit for bit.

pub mod ccr;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod nets;
pub mod rng;
pub mod tasks;
pub mod tensor;

mod book;

pub use error::{Error, Result};
