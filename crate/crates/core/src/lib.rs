//! FlashLight CNN: a residual inception denoiser for grayscale images with
//! additive white Gaussian noise, built on a small self-contained NCHW tensor
//! and gradient engine.
//!
//! * [`tensor`]: dense tensors and differentiable primitives.
//! * [`model`]: network graphs, initialization, checkpoints.
//! * [`train`]: noise, patch sampling, loss, Adam and the training loop.
//! * [`eval`]: PSNR/SSIM and dataset evaluation reports.
//! * [`imageio`]: binary PGM I/O and value-range conversion.

pub mod eval;
pub mod imageio;
pub mod model;
pub mod tensor;
pub mod train;

pub use tensor::{DType, Scalar, Tensor, TensorError};
