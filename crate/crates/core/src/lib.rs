//! Neural radiance field mapping for low-cost robots.
//!
//! A hash-encoded radiance field is trained from simulated RGB cameras,
//! ultrasonic sensors (USS) and infrared time-of-flight arrays (IRS). A
//! probabilistic occupancy grid accelerates ray marching and is updated both
//! from the field's densities and from IRS depth readings. The [`eval`]
//! module implements the planar scan protocol used to score the learned map.

pub mod diffnet;
pub mod error;
pub mod eval;
pub mod field;
pub mod hashenc;
pub mod occgrid;
pub mod real;
pub mod render;
pub mod scene;
pub mod simrig;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
pub use real::Real;
