//! Smooth-curve estimation with spike detection.
//!
//! A noisy signal `y_i = f(x_i) + spike_i + noise_i` is decomposed by fitting
//! penalized B-splines over a grid of smoothing parameters, classifying
//! residuals with a two-component Gaussian mixture fitted by EM, and refitting
//! the curve on the observations judged to be spike-free.

// `!(x > 0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod banded;
pub mod bspline;
pub mod cli;
pub mod mixture_em;
pub mod pipeline;
pub mod scalar;
pub mod simgen;
pub mod smoother;
pub mod theory;

pub use scalar::Scalar;

pub type KnotVector64 = bspline::KnotVector<f64>;
pub type PenaltyMatrix64 = bspline::PenaltyMatrix<f64>;
pub type SmoothFit64 = smoother::SmoothFit<f64>;
pub type MixtureParams64 = mixture_em::MixtureParams<f64>;
pub type EmResult64 = mixture_em::EmResult<f64>;
pub type PipelineResult64 = pipeline::PipelineResult<f64>;
pub type SplineBasis64 = pipeline::SplineBasis<f64>;

pub type KnotVector32 = bspline::KnotVector<f32>;
pub type SmoothFit32 = smoother::SmoothFit<f32>;
pub type MixtureParams32 = mixture_em::MixtureParams<f32>;
pub type PipelineResult32 = pipeline::PipelineResult<f32>;
