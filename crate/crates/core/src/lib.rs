//! Blind image deblurring with a kernel-estimating analysis network and a
//! kernel-guided synthesis U-Net.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine (convolution, pooling,
//!   up-sampling, ReLU, affine layers, losses) with a finite-difference checker.
//! - [`xcorr`]: the pairwise feature cross-correlation layer.
//! - [`analysis`]: the network that estimates an m×m blur kernel from the
//!   luminance of a blurry image.
//! - [`synthesis`]: the U-Net whose activations are modulated per channel by
//!   multipliers and biases computed from the kernel.
//! - [`blur`]: camera-shake kernel simulation and the blur/noise degradation.
//! - [`data`]: PNG I/O, luminance transforms, cropping and sample generation.
//! - [`train`]: losses, Adam, plateau schedule, staged training and the
//!   kernel-size classifier.
//! - [`metrics`]: PSNR, mean SSIM, evaluation reports and the guidance ablation.
//! - [`gradsuite`]: finite-difference checks of every differentiable operation.
//! - [`pipeline`]: inference, including routing through size-specific pairs.
//! - [`checkpoint`] and [`config`]: the on-disk formats.

pub mod analysis;
pub mod blur;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod synthesis;
pub mod tensor;
pub mod train;
pub mod xcorr;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
