//! Staged supervised contrastive learning for H&E histopathology images.
//!
//! The crate covers stain separation and HED augmentation, the contrastive
//! loss family with exact gradients, similarity-based pair relaxing, a small
//! hand-differentiated convolutional encoder, dual-head fine-tuning, and the
//! evaluation metrics, plus the orchestration that chains them.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod pairs;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod stain;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageTensor;
