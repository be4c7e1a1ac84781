//! Multi-view temporal transformer for video inpainting detection.
//!
//! Each clip is tokenized at several tubelet lengths, encoded by per-view
//! shifted-window branches that exchange information through deformable
//! window cross-attention, and decoded by a pyramid that mixes the branches,
//! a DCT band decomposition of the middle frame and a global feature into a
//! per-pixel inpainting probability.

pub mod attention;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dwti;
pub mod encoder;
pub mod error;
pub mod frequency;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod perturb;
pub mod tokenizer;
pub mod train;

pub use config::{ExperimentConfig, ModelConfig};
pub use error::{CoreError, Result};
