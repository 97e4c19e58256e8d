//! Differentially private forward learning.
//!
//! Gradients are estimated with the likelihood-ratio method: Gaussian noise is
//! injected into a layer's pre-activation output during the forward pass and
//! the noisy loss is correlated with the injected noise. A per-step privacy
//! controller picks the injected noise scale so that the batch-summed estimate
//! carries at least `sigma0 * C` standard deviation in every direction, which
//! lets the privacy cost be accounted for like a sampled Gaussian mechanism
//! whose batches are drawn by Poisson sampling with rejection of small batches.
//!
//! Module map:
//!
//! * [`numkit`]: matrices, symmetric eigensolver, log-space binomial
//!   probabilities, reproducible random streams.
//! * [`sampler`]: Poisson batch sampling with rejection.
//! * [`network`]: a small MLP with clean/noisy forward passes, layer
//!   Jacobians and exact backpropagation.
//! * [`estimator`]: likelihood-ratio gradient proxies, repeat averaging and
//!   clipping.
//! * [`controller`]: noise-scale selection and rank-deficiency remediation.
//! * [`accountant`]: Rényi-DP bound for the rejection-sampled Gaussian
//!   mechanism and conversion to `(epsilon, delta)`.
//! * [`harness`]: datasets, configuration, the training loops, metrics.

pub mod accountant;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod network;
pub mod numkit;
pub mod sampler;

pub mod par;

pub use error::{Error, Result};
