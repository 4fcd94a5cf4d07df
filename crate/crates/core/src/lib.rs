//! Deformable Gaussian occupancy.
//!
//! A set of canonical 3D Gaussians is deformed to neighbouring frames by a
//! small network with a rigid and a nonrigid branch, splatted into a voxel
//! feature volume for occupancy prediction, and rendered to images so it can
//! be trained from 2D pseudo labels and teacher features alone.

pub mod error;
pub mod geom;
pub mod metrics;
mod binio;
pub mod deformation;
pub mod distillation;
pub mod encoding;
pub mod nn;
pub mod objective;
pub mod rendering;
pub mod splatting;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
