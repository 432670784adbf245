//! Constituent-level extractive summarization of long narrative chapters.
//!
//! The crate covers the whole path from bracketed parses to a ranked,
//! length-budgeted extract: head-rule spines ([`treebank`]), clause-level
//! extraction units ([`segmenter`]), greedy oracle labels ([`aligner`]),
//! evaluation metrics ([`metrics`]), a small autodiff stack and the unit
//! scorer ([`nnet`]), training and selection ([`extractor`]), and the staged
//! file pipeline behind the `spinalsum` binary ([`pipeline`]).

pub mod aligner;
pub mod error;
pub mod extractor;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod segmenter;
pub mod synthetic;
pub mod treebank;

pub use error::{Error, Result};
