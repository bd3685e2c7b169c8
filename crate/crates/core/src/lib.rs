//! Sensor pose optimization for maximizing the visibility of target objects.
//!
//! Sensors sit on line-segment rails. A scenario is a static environment plus
//! a set of frames, each a placement of box-shaped target objects. Poses are
//! optimized either by gradient ascent on a smooth visibility score or by an
//! integer program over a grid of candidate poses.

pub mod camera;
pub mod cli;
pub mod diffvis;
pub mod error;
pub mod eval;
pub mod gdopt;
pub mod io;
pub mod ipopt;
pub mod raster;
pub mod scene;
pub mod seed;

pub use error::{Error, Result};
