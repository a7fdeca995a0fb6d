//! Certified robustness for classifiers smoothed over multiplicative
//! transformation parameters.
//!
//! The smoothing law of choice is the Rayleigh distribution. A classifier
//! `f` is replaced with `g(x) = argmax_c P(f(ψ_β(x)) = c)` where `ψ` is a
//! multiplicatively composable transformation (gamma correction being the
//! motivating case) and `β ~ Rayleigh(σ)`. Given a lower bound on the
//! top-class probability, [`cert_engine`] returns an interval `(γ1, γ2)` of
//! attack factors that provably leave `g` unchanged.
//!
//! Modules:
//! - [`distributions`]: Rayleigh, inverse Rayleigh and log-space symmetric laws
//!   with deterministic counter-based sampling.
//! - [`cert_engine`]: single-parameter certificates, Clopper–Pearson bounds and
//!   log-space baseline radii.
//! - [`multi_cert`]: membership queries for the multi-parameter robust region.
//! - [`transforms`]: gamma correction, 8-bit quantization, conversion error and
//!   the MST1 tensor format.
//! - [`smoothing_runtime`]: the Monte-Carlo smoothed classifier and the
//!   empirical robustness sweep.
//! - [`realistic_pipeline`]: double smoothing for quantized images with an
//!   explicit error budget.

// `!(x > 0.0)` is used deliberately throughout so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binomial;
pub mod cert_engine;
pub mod distributions;
mod error;
pub mod multi_cert;
pub mod normal;
pub mod realistic_pipeline;
pub mod root;
pub mod smoothing_runtime;
pub mod transforms;

pub use error::{Error, Result};
