//! EDU-Net: a dual-branch (EfficientNet-style local + large-kernel global)
//! encoder-decoder for retinal OCT fluid segmentation, with multi-category
//! edge-guided attention, built on an in-crate reverse-mode autodiff engine.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod gradcheck_suite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod params;
pub mod pyramid;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
