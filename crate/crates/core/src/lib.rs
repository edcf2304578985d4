//! Differentiable 4D Gaussian splatting with a learned per-primitive
//! dynamic coefficient that separates static and dynamic scene content.

pub mod decouple;
pub mod deform;
pub mod error;
pub mod image;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod params;
pub mod render;
pub mod scene;
pub mod synth;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use nalgebra;
