//! Extraction of lane-level intersection maps from georeferenced mobile
//! LiDAR point clouds.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod features;
pub mod georef;
pub mod mapmsg;
pub mod pcio;
pub mod pipeline;
pub mod raster;
pub mod segment;
pub mod surface;
pub mod synth;

pub use error::{Error, Result};
