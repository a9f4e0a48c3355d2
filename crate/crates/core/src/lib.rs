//! Two-stage synthetic radiograph generation: a pixel-space diffusion
//! generator for low-resolution seeds, a hybrid-attention super-resolution
//! stage, the degradation pipeline that builds its training pairs, and the
//! evaluation metrics and observer-study scoring used to judge the output.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the default `f64` instantiation.

// `!(x > 0)` style checks are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod degradation;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod sr;
pub mod study;
pub mod toy;

pub use diffusion::{
    analytic_gaussian_predictor, ddim_step, ddpm_step, forward_noise, noising_diagnostics,
    sample, sample_raw, AnalyticGaussianPredictor, NoisePredictor, SamplerConfig,
};
pub use error::{Error, Result};
pub use grid::{ImageGrid, PixelStats, Resolution};
pub use scalar::Scalar;
pub use schedule::{ddim_subsequence, ema_gamma, EmaSchedule, NoiseSchedule, ScheduleKind};

pub type Grid = ImageGrid<f64>;
pub type Grid32 = ImageGrid<f32>;
pub type Schedule = NoiseSchedule<f64>;
