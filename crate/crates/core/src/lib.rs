//! Attention-based multiple instance learning for whole-slide classification
//! with discriminative region active sampling.
//!
//! A slide is a [`slide::Bag`] of patch embeddings on a grid. A gated
//! attention network ([`model`]) is trained on whole bags ([`train`]). At
//! evaluation time a bag can be processed in full, by uniform random
//! sampling, or by attention-guided active sampling ([`sampler`]), which
//! spends a fixed patch budget near regions the model already finds
//! discriminative. [`eval`] provides metrics, patient-stratified folds and
//! the repeat bootstrap; [`bench`] measures time and buffer memory with
//! on-the-fly patch encoding; [`tune`] is a random-search tuner.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod export;
pub mod matrix;
pub mod model;
pub mod sampler;
pub mod seed;
pub mod slide;
pub mod train;
pub mod tune;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{AttentionResult, ModelDims, ModelParams};
pub use sampler::{Method, SamplingConfig, SamplingResult};
pub use slide::Bag;
