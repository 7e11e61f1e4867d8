//! Weight-sharing architecture search for dynamic TDNN speaker networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`space`]: subnet encoding, validation, sampling and exact space sizes.
//! - [`numerics`]: a small 64-bit array engine with a reverse-mode tape.
//! - [`supernet`]: the eight-cell dynamic TDNN and subnet export.
//! - [`trainer`]: progressive shrinking with dynamic path training.
//! - [`costmodel`]: MACs/parameter counters and latency tables.
//! - [`predictor`]: the feed-forward accuracy predictor.
//! - [`searcher`]: grid, random and evolutionary constrained search.
//! - [`evalkit`]: verification scoring (EER, minDCF, s-norm, Spearman).
//! - [`harness`]: synthetic data, checkpoints and end-to-end pipelines.

pub mod costmodel;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod numerics;
pub mod predictor;
pub mod searcher;
pub mod space;
pub mod supernet;
pub mod trainer;

pub use error::{Error, Result};
