//! Mesh-bound Gaussian-splat avatars: body model, arm-chain gap filling,
//! splat binding, a differentiable tile rasterizer, losses, per-frame pose
//! fitting and appearance training.

pub mod binding;
pub mod body;
pub mod error;
pub mod fitting;
pub mod imaging;
pub mod io;
pub mod kinematics;
pub mod losses;
pub mod math;
pub mod raster;
pub mod synthetic;
pub mod trainer;
pub mod types;
pub mod validate;

pub use error::{Error, Result};
