//! Amortized inference regularization for variational autoencoders.
//!
//! Building blocks:
//!
//! - [`autodiff`] — tape-based reverse-mode AD over dense f64 tensors
//! - [`dist`] — diagonal Gaussians and Bernoulli vectors (sampling,
//!   log-densities, closed-form KL), in both plain-value and on-tape form
//! - [`nn`] — dense layers, the norm-capped weight-normalized layer, and
//!   encoder/decoder construction from architecture strings
//! - [`objective`] — ELBO / importance-weighted / denoising training losses
//! - [`train`] — Adam with exponential learning-rate decay and early stopping
//! - [`eval`] — amortized bounds, per-example importance-weighted SVI, and
//!   the inference-gap decomposition
//! - [`oracle`] — closed-form and brute-force references on tractable
//!   exponential-family instances, plus the `verify` check suite
//! - [`data`] — IDX ingestion, static binarization, splits, synthetic data

pub mod autodiff;
pub mod data;
pub mod dist;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objective;
pub mod oracle;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
