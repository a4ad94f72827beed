//! Quantization laboratory for a one-step diffusion super-resolution model.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`]: dense f64 tensors, a reverse-mode tape with a custom-gradient
//!   hook, a Jacobi SVD, and Adam/SGD optimizers;
//! - [`quant`]: affine fake-quantization with straight-through and
//!   learned-step gradients;
//! - [`reparam`]: the channel-wise equivalent transformation and the low-rank
//!   finetuning quantizer built on it;
//! - [`schedule`]: the forward-noising schedule, the one-step latent
//!   restoration formula, and the timestep perturbation-amplification law;
//! - [`model`]: the toy encoder/denoiser/decoder network with a module
//!   registry;
//! - [`pipeline`]: timestep retraining, reversed per-module calibration,
//!   extended end-to-end training, and the ablation grid;
//! - [`metrics`]: PSNR/SSIM, rank correlation, and the size/ops accounting;
//! - [`io`]: PPM images, synthetic datasets, checkpoints, run configs;
//! - [`cli`]: the `qartsr` command line.

#![forbid(unsafe_code)]

pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod reparam;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{QartError, Result};
