//! Coarse-to-fine Siamese change detection (C2FNet) with mean-teacher
//! semi-supervised training.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`kernels`] and [`autograd`] form a small CPU tensor engine
//!   with reverse-mode differentiation over the handful of operators the
//!   network needs.
//! * [`model`] wires the Siamese VGG-style encoder and the attention decoder.
//! * [`trainer`] holds losses, the EMA teacher, AdamW, the supervised and
//!   semi-supervised loops and the checkpoint container.
//! * [`data`] covers tiling, split manifests, the PNG dataset layout and the
//!   synthetic bi-temporal generator.
//! * [`metrics`] computes confusion counts, scores and confusion-map renders.
//!
//! Inner loops run data-parallel through rayon when the `parallel` feature is
//! enabled (the default) and sequentially otherwise. Results are identical in
//! both builds.

pub mod autograd;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
