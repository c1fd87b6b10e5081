//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as primitives are applied; a single
//! reverse sweep from a scalar loss then fills gradients for every leaf. The
//! primitive set is exactly what convolutional cell search needs: grouped
//! and dilated convolution, pooling, batch normalization, channel
//! concatenation, softmax and cross-entropy, scalar-weighted sums and mask
//! application.

mod error;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{BatchNormMode, BatchStats, Conv2dSpec, Pool2dSpec, Tape, VarId};
pub use tensor::{numel, Tensor};
