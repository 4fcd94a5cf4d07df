//! Unit quaternions in (w, x, y, z) order with right-handed rotations.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

pub type Quat = [f64; 4];

const MIN_NORM: f64 = 1e-12;

pub fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Scales `q` to unit length and flips its sign so that `w >= 0`.
///
/// Inputs already within a few ulps of unit length are only sign-canonicalized,
/// which makes a second pass bitwise idempotent.
pub fn normalize_quaternion(q: Quat) -> Result<Quat> {
    let norm = quat_norm(&q);
    if !(norm > MIN_NORM) {
        return Err(Error::DegenerateQuaternion(norm));
    }
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(q.map(|c| sign * c));
    }
    Ok(q.map(|c| sign * c / norm))
}

/// Backward of [`normalize_quaternion`]: maps a gradient on the output to the input.
pub fn normalize_quaternion_backward(q: &Quat, d_out: &Quat) -> Quat {
    let norm = quat_norm(q);
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    let unit = q.map(|c| c / norm);
    let dot: f64 = (0..4).map(|i| unit[i] * d_out[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = sign * (d_out[i] - unit[i] * dot) / norm;
    }
    out
}

/// Rotation matrix of a unit quaternion.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of an arbitrary non-zero quaternion (normalized internally).
pub fn rotation_matrix_raw(q: &Quat) -> Matrix3<f64> {
    let n = quat_norm(q);
    rotation_matrix(&q.map(|c| c / n))
}

/// Gradient of a scalar w.r.t. the raw quaternion given its gradient w.r.t.
/// `rotation_matrix_raw(q)`.
pub fn rotation_matrix_raw_backward(q: &Quat, d_r: &Matrix3<f64>) -> Quat {
    let n = quat_norm(q);
    let u = q.map(|c| c / n);
    let [a, b, c, d] = u;
    let g = |i: usize, j: usize| d_r[(i, j)];
    let da = 2.0
        * (-d * g(0, 1) + c * g(0, 2) + d * g(1, 0) - b * g(1, 2) - c * g(2, 0) + b * g(2, 1));
    let db = 2.0
        * (c * g(0, 1) + d * g(0, 2) + c * g(1, 0) - 2.0 * b * g(1, 1) - a * g(1, 2)
            + d * g(2, 0)
            + a * g(2, 1)
            - 2.0 * b * g(2, 2));
    let dc = 2.0
        * (-2.0 * c * g(0, 0) + b * g(0, 1) + a * g(0, 2) + b * g(1, 0) + d * g(1, 2)
            - a * g(2, 0)
            + d * g(2, 1)
            - 2.0 * c * g(2, 2));
    let dd = 2.0
        * (-2.0 * d * g(0, 0) - a * g(0, 1) + b * g(0, 2) + a * g(1, 0) - 2.0 * d * g(1, 1)
            + c * g(1, 2)
            + b * g(2, 0)
            + c * g(2, 1));
    let du = [da, db, dc, dd];
    let dot: f64 = (0..4).map(|i| u[i] * du[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (du[i] - u[i] * dot) / n;
    }
    out
}

pub fn rotate(q: &Quat, v: &Vector3<f64>) -> Vector3<f64> {
    rotation_matrix_raw(q) * v
}
