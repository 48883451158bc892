//! Skeleton-aware transformer for lifting 2D human poses to 3D, with an
//! uncertainty-guided refinement stage.

pub mod attention;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod runner;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
