//! Animatable human avatars from monocular video, built on spacetime
//! Gaussian splatting: splats carry polynomial motion and rotation in time,
//! are skinned to a skeleton, rendered with a differentiable tiled
//! rasterizer, and densified where optical flow shows motion.

pub mod adam;
pub mod appearance;
pub mod camera;
pub mod config;
pub mod deform;
pub mod error;
pub mod flowdens;
pub mod gauss;
pub mod img;
pub mod io;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod render;
pub mod skeleton;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
