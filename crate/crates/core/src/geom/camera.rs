//! Pinhole camera: +z forward, +x right, +y down. Extrinsics map world to camera.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Row-major 3x3 intrinsics in pixels.
    pub k: [[f64; 3]; 3],
    /// Row-major 4x4 world-to-camera rigid transform.
    pub extrinsic: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(k: Matrix3<f64>, extrinsic: Matrix4<f64>, width: usize, height: usize) -> Result<Self> {
        let cam = CameraModel {
            k: std::array::from_fn(|i| std::array::from_fn(|j| k[(i, j)])),
            extrinsic: std::array::from_fn(|i| std::array::from_fn(|j| extrinsic[(i, j)])),
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with world `up` used to fix the roll.
    /// The principal point sits at the image center.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-9 {
            return Err(Error::InvalidCamera("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let k = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        CameraModel::new(k, e, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::InvalidCamera("K must have last row (0, 0, 1)".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        let r = self.rotation();
        if (r * r.transpose() - Matrix3::identity()).abs().max() > ORTHONORMAL_TOLERANCE
            || (r.determinant() - 1.0).abs() > ORTHONORMAL_TOLERANCE
        {
            return Err(Error::InvalidCamera("extrinsic rotation is not proper orthonormal".into()));
        }
        if self.extrinsic[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidCamera("extrinsic last row must be (0, 0, 0, 1)".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.k[i][j])
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.extrinsic[i][j])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.extrinsic[0][3], self.extrinsic[1][3], self.extrinsic[2][3])
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Pixel coordinates of a camera-space point (no culling).
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> [f64; 2] {
        let k = &self.k;
        [
            (k[0][0] * pc.x + k[0][1] * pc.y) / pc.z + k[0][2],
            (k[1][0] * pc.x + k[1][1] * pc.y) / pc.z + k[1][2],
        ]
    }

    /// World-space ray through the center of pixel (`col`, `row`); the
    /// direction is unit length.
    pub fn pixel_ray(&self, col: usize, row: usize) -> (Vector3<f64>, Vector3<f64>) {
        let u = col as f64 + 0.5;
        let v = row as f64 + 0.5;
        let kinv = self
            .intrinsics()
            .try_inverse()
            .expect("intrinsics are invertible");
        let d_cam = kinv * Vector3::new(u, v, 1.0);
        let d_world = self.rotation().transpose() * d_cam;
        (self.center(), d_world.normalize())
    }

    /// Camera-space depth (z) of the world point `origin + t * dir`.
    pub fn depth_along(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> f64 {
        self.world_to_camera(&(origin + dir * t)).z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_conventions() {
        let cam = CameraModel::look_at([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 50.0, 64, 48)
            .unwrap();
        // looking along +x with z up: right is -y, down is -z.
        let pc = cam.world_to_camera(&Vector3::new(5.0, -1.0, -2.0));
        assert!((pc - Vector3::new(1.0, 2.0, 5.0)).norm() < 1e-12);
        assert!(cam.center().norm() < 1e-12);
    }

    #[test]
    fn pixel_ray_hits_projected_pixel() {
        let cam = CameraModel::look_at([1.0, 2.0, 3.0], [4.0, -1.0, 0.0], [0.0, 0.0, 1.0], 40.0, 32, 24)
            .unwrap();
        let (o, d) = cam.pixel_ray(5, 17);
        assert!((d.norm() - 1.0).abs() < 1e-12);
        let p = o + d * 7.0;
        let uv = cam.project_camera_point(&cam.world_to_camera(&p));
        assert!((uv[0] - 5.5).abs() < 1e-9 && (uv[1] - 17.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_intrinsics_and_rotation() {
        let mut k = Matrix3::identity();
        k[(2, 2)] = 2.0;
        assert!(CameraModel::new(k, Matrix4::identity(), 4, 4).is_err());
        let mut e = Matrix4::identity();
        e[(0, 0)] = -1.0;
        assert!(CameraModel::new(Matrix3::identity(), e, 4, 4).is_err());
    }
}
