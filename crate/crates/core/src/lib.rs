//! Multi-range bird's-eye-view terrain mapping for off-road driving.

pub mod bevproject;
pub mod evalharness;
pub mod error;
pub mod gridmap;
pub mod groundtruth;
pub mod io;
pub mod losses;
pub mod planner;
pub mod predictor;
pub mod synthworld;
pub mod voxelmap;

pub use error::{Error, Result};
pub use gridmap::{GridMap, Layer, Pose2p5, RangeId, RangeSpec, RegionLabel, RegionLayer};
