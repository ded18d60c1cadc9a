//! Coarse-to-fine deformable registration and transformer-conv fusion for
//! misaligned infrared/visible image pairs.
//!
//! The crate is organised bottom-up:
//! - [`field`]: deformation-field algebra (warping, integration, composition).
//! - [`synth`]: hybrid affine + elastic misalignment synthesis.
//! - [`nn`]: the registration and fusion networks.
//! - [`losses`]: registration and fusion training objectives.
//! - [`metrics`]: registration and fusion quality metrics.

pub mod error;
pub mod field;
pub mod gradcheck;
pub mod image;
pub mod nn;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
pub use field::{DisplacementField, VelocityField};
pub use image::Image;
