//! C2FNet: a Siamese VGG-style encoder, absolute-difference fusion, and a
//! coarse-to-fine attention decoder.

mod config;
pub mod gradcheck;
pub mod layers;
mod network;
mod params;

pub use config::{ModelConfig, ModuleToggles, Width};
pub use layers::{BnMode, BnUpdate, Ctx};
pub use network::{fuse_bitemporal, C2FNet, FeatureMap, FeaturePyramid, ForwardOutput, Prediction, LEVELS};
pub use params::{ModelParams, BN_MOMENTUM};
