//! Dual-pixel alignment network for defocus deblurring.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: NCHW tensors, a dynamic reverse-mode tape and the standard layers.
//! * [`align`]: correlation cost volume, offset heads and modulated deformable convolution.
//! * [`model`]: the encoder/decoder network, parameter store and checkpoints.
//! * [`synth`]: synthetic dual-pixel triplets and the on-disk dataset layout.
//! * [`train`]: reconstruction losses, Adam, the learning-rate schedule and the training loop.
//! * [`metrics`]: PSNR, SSIM and MAE.
//! * [`gradsuite`]: finite-difference checks over every differentiable operator.

pub mod align;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Shape4, Tensor, Var};
