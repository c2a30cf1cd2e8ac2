//! Recursive multi-scale raw-video denoising toolkit.
//!
//! The pipeline operates on Bayer-packed 4-channel frames: a learnable
//! orthonormal color decorrelation, a recursive temporal fusion stage with
//! explicit per-pixel noise-variance propagation, a denoising stage, and a
//! detail-restoring refinement stage, all run coarse-to-fine over a shared
//! three-scale pyramid. The crate also ships the training engine (manual
//! reverse-mode gradients through the full recurrence), a synthetic scene
//! generator, noise calibration, and PSNR/SSIM evaluation.

pub mod color_transform;
pub mod denoise_net;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod noise_model;
pub mod raw_data;
pub mod tape;
pub mod train_engine;

pub use error::{Error, Result};
