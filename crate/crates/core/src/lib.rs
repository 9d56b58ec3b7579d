//! Treatment-learning causal transformer.
//!
//! A causal variational encoder-decoder for noisy image classification: a
//! binary treatment (presence of a visual perturbation) selects between
//! per-arm inference heads, a conditional-query attention block feeds a
//! treatment-switched Gaussian posterior, and the decoder carries
//! potential-outcome heads. The crate also ships the synthetic causal-pair
//! data generator, the training objective and the causal evaluation suite.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod train;

pub use error::{Result, TltError};
