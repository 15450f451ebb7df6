//! Autoregressive image generation with binary latent tokens.
//!
//! The stack has three parts: a sign quantizer with an implicit `{-1,+1}^d`
//! codebook ([`binq`]) wrapped in a small trainable tokenizer ([`toktrain`]),
//! a rectified-flow head that samples binary tokens jointly by integrating a
//! learned velocity field and snapping to the hypercube ([`flowhead`]), and a
//! block-causal transformer that predicts patches of tokens in parallel,
//! patch by patch ([`backbone`], [`pipeline`]). [`evalx`] holds the baseline
//! heads and the synthetic-distribution experiments used to verify the
//! design, and [`cli_support`]-style plumbing (configs, checkpoints, metrics)
//! lives in the remaining modules.
//!
//! Everything runs in f64 on a deterministic kernel set: same seed, same
//! bytes out.

pub mod backbone;
pub mod binq;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalx;
pub mod flowhead;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod toktrain;

pub use error::{Error, Result};
