//! Desk-scale differentiable 3D Gaussian splatting for super-resolved scene
//! reconstruction from low-resolution multi-view captures.
//!
//! The training objective mixes two terms: a prior term that supervises
//! high-resolution renders with pseudo-HR targets produced by a 2D
//! super-resolution provider, and a consistency term that matches the
//! downsampled high-resolution render against the low-resolution
//! observation.
//!
//! Module map:
//! - [`scene`]: Gaussian parameters, cameras and scene/camera files.
//! - [`render`]: projection, front-to-back compositing and its analytic adjoint.
//! - [`image_ops`]: resampling, L1, SSIM, PSNR and PNG I/O.
//! - [`prior`]: pseudo-HR target providers.
//! - [`objective`]: prior term, consistency term and their combination.
//! - [`trainer`]: Adam, densification/pruning and the training loop.
//! - [`harness`]: synthetic datasets, ablation, sweep and evaluation.
//! - [`plot`]: line plots drawn into image buffers.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod harness;
pub mod image_ops;
pub mod objective;
pub mod plot;
pub mod prior;
pub mod render;
pub mod scene;
pub mod trainer;

mod error;

pub use error::{Error, Result};
pub use image_ops::ImageBuffer;
pub use scene::{Camera, GaussianParams, GaussianScene};
