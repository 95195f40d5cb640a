//! Site-specific pathloss-map prediction workbench.
//!
//! * [`geo`]: rasterized scenes, procedural maps, line of sight.
//! * [`propagation`]: 3GPP UMi baseline and the ray-launch ground truth.
//! * [`dataset`]: gray conversion, infill, augmentation, splits, disk format.
//! * [`nn`] and [`model`]: the PMNet encoder-decoder and its training engine.
//! * [`train`]: training loop, fine-tuning and transfer-learning harness.
//! * [`eval`]: metrics, reports and heatmap rendering.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geo;
pub mod model;
pub mod nn;
pub mod propagation;
pub mod raster;
pub mod train;

pub use error::{Error, Result};
