//! Pavement distress detection with attention-augmented C3 blocks.
//!
//! - [`cbam`]: channel and spatial attention gates
//! - [`detector`]: network configuration, forward pass and box decoding
//! - [`training`]: target assignment, loss and the training loop
//! - [`evaluation`]: IoU, NMS, matching, AP/mAP and confidence sweeps
//! - [`gradcam`]: class activation maps and overlays
//! - [`data`]: label files, manifests, synthetic data and letterboxing
//! - [`checkpoint`]: the binary weight format

pub mod cbam;
pub mod checkpoint;
pub mod data;
pub mod detector;
mod error;
pub mod evaluation;
pub mod gradcam;
pub mod layers;
pub mod params;
pub mod pipeline;
pub mod training;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use detector::{Detector, NetworkConfig, RawPrediction};
pub use error::{Error, Result};
pub use params::{Mode, ParamStore, Session};
pub use pavescan_tensor as tensor;
