//! Inlier-centric post-training quantization.
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece of
//! the pipeline:
//!
//! * [`tensor`] and [`rng`]: dense double-precision tensors, exact summation,
//!   moments, top-k selection and a portable SplitMix64 generator.
//! * [`quant`]: uniform affine quantization, min-max calibration and the
//!   scale-candidate grid.
//! * [`detector`]: synthetic anomaly-contaminated scenes and a two-layer
//!   heatmap detector with analytic forward and backward passes.
//! * [`saliency`]: the top-K heatmap negative log-likelihood, its gradient and
//!   the per-volume L1 gradient saliency.
//! * [`inlier`]: two-component Gaussian mixture EM, posterior inlier
//!   probabilities, threshold masks and a 1-D k-means baseline.
//! * [`calibrate`]: statistics collection, diagonal Fisher weights, the
//!   inlier-restricted objective and the layer-wise calibration loop.
//!
//! File formats, experiment orchestration and the command line live in the
//! companion `inlierq` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod calibrate;
pub mod detector;
pub mod error;
pub mod inlier;
pub mod quant;
pub mod rng;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
