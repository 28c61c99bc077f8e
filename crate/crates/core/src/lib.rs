//! Geometric bound calculators and certified piecewise-linear map
//! constructions for axis-parallel rectangles (boxes) in dimension up to 10.

pub mod bounds;
pub mod error;
pub mod falconer;
pub mod linalg;
pub mod map;
pub mod planner;
pub mod qmc;
pub mod skeleton;
pub mod voxel;
pub mod rect;
pub mod snake;
pub mod threads;

pub use error::{Error, Result};
pub use rect::Rectangle;
