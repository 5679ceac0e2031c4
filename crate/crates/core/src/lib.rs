//! Frequency-domain diffusion purification of adversarial images.
//!
//! The forward side injects noise shaped by the inverse band magnitudes of the
//! input spectrum; the reverse side keeps the input's low-frequency magnitudes
//! and confines low-frequency phases near the input's phases. A synthetic
//! grating dataset, a small MLP classifier and gradient attacks make the whole
//! pipeline testable end to end.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod freqpure;
pub mod mani;
pub mod metrics;
pub mod purify;
pub mod rng;
pub mod schedule;
pub mod spectral;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, Tensor};
