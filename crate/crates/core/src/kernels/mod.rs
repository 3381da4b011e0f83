//! Forward and backward numeric kernels over `[n, c, h, w]` tensors.
//!
//! These are plain functions on [`Tensor`](crate::Tensor); the autograd tape
//! in [`crate::autograd`] decides which of them to call and with what saved
//! state.

pub mod conv;
pub mod norm;
pub mod pool;
pub mod pointwise;
pub mod resample;

pub use conv::ConvSpec;
