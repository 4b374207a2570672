//! Cascaded ROI-masked V-Net segmentation of multimodal brain volumes.
//!
//! The crate is organised bottom-up: dense tensors and a tape-based
//! reverse-mode engine, the residual V-Net blocks built on them, the masked
//! dense losses, the non-learned morphology used between the two cascade
//! stages, evaluation metrics, volume I/O with a synthetic phantom
//! generator, and finally the training and inference drivers.

pub mod autodiff;
pub mod cascade;
pub mod checkpoint;
mod conv;
pub mod data;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod morphology;
pub mod phantom;
pub mod tensor;
pub mod train;
pub mod volume;
pub mod vnet;

pub use error::{Error, ErrorCategory, Result};
