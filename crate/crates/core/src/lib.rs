//! Meshless skeleton-conditioned hand renderer.
//!
//! The pipeline: a procedural capsule-hand scene generator produces
//! calibrated multi-view images with masks and skeletons; a color-consistency
//! carver extracts labeled point clouds; a skeleton-conditioned occupancy
//! network learns the hand volume in a canonical pose; an occupancy-guided
//! ray engine bounds, prunes and samples camera rays; a conditioned radiance
//! MLP renders low-resolution crops which a small convolutional model
//! upsamples back to full resolution.

pub mod appearance;
pub mod camera;
pub mod carve;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geom;
pub mod image_buf;
pub mod metrics;
pub mod model;
pub mod occupancy;
pub mod pipeline;
pub mod radiance;
pub mod rng;
pub mod sampling;
pub mod skeleton;
pub mod synth;
pub mod upsampler;

pub use error::{Error, Result};

/// Compositing measures segment lengths in millimeters so that trained
/// densities stay O(1) under softplus.
pub const DENSITY_UNIT_PER_M: f32 = 1000.0;
