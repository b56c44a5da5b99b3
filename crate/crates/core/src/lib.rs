//! Desk-scale neural language-modeling workbench.
//!
//! Built around a small reverse-mode autodiff engine ([`autograd`]), the
//! crate provides the layers of a modernized neural probabilistic language
//! model (windowed concatenation plus global context summaries), causal
//! multi-head attention with an optional local window, five model variants
//! assembled from one declarative config, corpus preprocessing, Adam/SGD
//! training with a warmup+cosine schedule, checkpoints, and the evaluation
//! protocols (scored-suffix perplexity, target-word accuracy buckets and
//! context-length sweeps).

pub mod autograd;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod kv;
pub mod layers;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
