//! Joint segmentation and image-level classification network.
//!
//! A U-Net encoder-decoder with same-scale skip concatenations produces
//! pixelwise class scores. Each classification branch taps the
//! second-to-last decoder layer: mean-pool, a 3x3 conv and seven
//! fully-connected layers, the output of the first fc layer concatenated
//! into the input of the sixth. Binary models carry one branch; `K`-class
//! models carry one branch per tumor subclass (`K - 1`).

pub mod checkpoint;
mod config;
mod describe;
mod model;

pub use checkpoint::Checkpoint;
pub use config::{BranchConfig, ModelConfig};
pub use describe::{describe, parameter_count, LayerInfo};
pub use model::{argmax_labels, ForwardOutput, ForwardPass, Model};
