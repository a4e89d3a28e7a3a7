//! Illumination-compensated curvilinear landmark detection.
//!
//! The network compensates underexposure with a learned illumination field,
//! encodes the image with a small convolutional encoder, filters bottleneck
//! and skip features by frequency and orientation, and decodes with a cascade
//! that alternates between segmentation features and Bézier curve refinement.

pub mod asco;
pub mod augment;
pub mod checkpoint;
pub mod curve;
pub mod error;
pub mod fosf;
pub mod gradsuite;
pub mod illumination;
pub mod image;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
