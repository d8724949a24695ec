//! Two-step real-world super-resolution toolkit.
//!
//! The pipeline transforms a real low-resolution image into a bicubic
//! look-alike with a small generator network, then super-resolves the
//! result with a network trained purely on bicubically downsampled pairs.
//! The crate also ships the analytic degradation simulator, patchwise
//! blur-kernel estimation, the training losses (pixel, adversarial, and
//! the SR-feature perceptual loss), trainers for all three networks, and
//! PSNR/SSIM evaluation.

pub mod degrade;
pub mod error;
pub mod imageio;
pub mod kernel_estim;
pub mod losses;
pub mod models;
pub mod nn;
pub mod resample;

pub use error::{RbsrError, Result};
