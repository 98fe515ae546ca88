//! Nucleus instance segmentation at desk scale.
//!
//! A dual-branch encoder-decoder network predicts a foreground probability
//! map and a thickened-contour probability map for each input image. The two
//! maps are combined by seeded region growing to recover individual nucleus
//! instances, which are then scored with Dice, AJI, and PQ.
//!
//! Everything runs on the CPU in double precision on top of a small
//! reverse-mode tensor engine (`tensor`), which keeps gradient checks against
//! finite differences meaningful.

pub mod attention;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod postprocess;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
