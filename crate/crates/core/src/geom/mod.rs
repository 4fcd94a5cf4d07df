//! Value types shared by every stage: grids, cameras, Gaussians, quaternions
//! and voxel ray traversal.

pub mod camera;
pub mod gaussian;
pub mod grid;
pub mod quat;
pub mod raycast;

pub use camera::CameraModel;
pub use gaussian::{validate_gaussian, GaussianGrad, GaussianPrimitive, Violation, DEFAULT_FEAT_DIM};
pub use grid::{make_grid_spec, FeatureVolume, SemanticLabelGrid, VoxelGridSpec, FREE};
pub use quat::{normalize_quaternion, Quat};
pub use raycast::{first_hit, traverse, RayHit};
