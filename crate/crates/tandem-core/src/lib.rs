//! One transformer, two generation paths.
//!
//! This crate trains and runs a single weight-shared transformer that serves
//! discrete autoregressive text generation (causal attention mask) and
//! continuous latent-diffusion image generation (hybrid causal/bidirectional
//! mask). It is desk-scale by design: synthetic datasets, a CPU training
//! loop with hand-written reverse-mode gradients, and a verification harness
//! of invariant, oracle, and finite-difference checks.

pub mod app;
pub mod autoregression;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod mat;
pub mod masking;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod training;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
