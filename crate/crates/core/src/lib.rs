//! Image-based mutual-gaze detection trained with an auxiliary 3D gaze task.
//!
//! A shared convolutional encoder maps each 64x64 head patch to 12 features.
//! A mutual-gaze head scores the pair from both encodings plus an 11-dim
//! spatial encoding of the two head boxes. During training an auxiliary head
//! regresses each person's 3D gaze against pseudo labels: for a positive pair
//! the first head should look along the relative head direction `v` and the
//! second along `-v`, where `v` comes from box geometry alone.
//!
//! Modules:
//! - [`geometry`]: camera model, spatial encodings, pseudo gaze labels
//! - [`nn`]: layers, losses, optimizer, checkpoints, gradient checking
//! - [`model`]: the network, the combined loss and the training loop
//! - [`data`]: annotations, patch cropping, augmentation, synthetic scenes
//! - [`eval`]: average precision and the experiment harnesses

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, HeadBox, ImageDims, SpatialEncoding, Vec3};
pub use model::{LossBreakdown, ModelParams, PairPrediction, TrainConfig};
