//! Normalizing-flow variational encoder-decoder for abstractive summarization.
//!
//! The crate is self-contained: [`numcore`] provides the tensors and the
//! differentiation tape, everything else builds on it.

pub mod error;
pub mod flows;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
