//! Synthetic training-data generation from green-screen object footage.
//!
//! The pipeline runs in stages that map onto the modules below:
//!
//! * [`keyer`] pulls alpha mattes and despilled cutouts out of green-screen frames.
//! * [`mocap`] reads motion-capture tracks, aligns them with video and derives
//!   per-frame viewing directions and depths.
//! * [`assetlib`] stores cutouts on disk, indexes them by class and samples them,
//!   optionally flattening the viewpoint distribution.
//! * [`compositor`] plans and renders composites with brightness falloff and
//!   feathered or Poisson blending.
//! * [`annotate`] writes COCO, YOLO, instance masks and reproducibility manifests.
//! * [`pipeline`] drives parallel, reproducible dataset generation.
//! * [`sampler`] builds train/validation splits and N-shot subsets.
//! * [`metrics`] scores detection and segmentation predictions.

pub mod annotate;
pub mod assetlib;
pub mod compositor;
pub mod config;
pub mod error;
pub mod geometry;
pub mod keyer;
pub mod metrics;
pub mod mocap;
pub mod pipeline;
pub mod raster;
pub mod sampler;

pub use error::{Error, Result};

/// Version string stamped into every manifest.
pub const TOOL_VERSION: &str = concat!("synthforge ", env!("CARGO_PKG_VERSION"));
