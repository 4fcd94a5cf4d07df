use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::quat::{quat_norm, rotation_matrix_raw, rotation_matrix_raw_backward, Quat};

/// Default latent feature width per Gaussian.
pub const DEFAULT_FEAT_DIM: usize = 32;

/// One anisotropic 3D Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    /// Unit quaternion (w, x, y, z).
    pub rot: Quat,
    pub scale: [f64; 3],
    pub opacity: f64,
    pub feat: Vec<f64>,
    /// Rigidity degree: 0 rigid, 1 fully deformable.
    pub mask: f64,
}

impl GaussianPrimitive {
    pub fn isotropic(mu: [f64; 3], scale: f64, opacity: f64, feat: Vec<f64>) -> Self {
        GaussianPrimitive {
            mu,
            rot: [1.0, 0.0, 0.0, 0.0],
            scale: [scale; 3],
            opacity,
            feat,
            mask: 0.0,
        }
    }

    pub fn mean(&self) -> Vector3<f64> {
        Vector3::from(self.mu)
    }

    /// World covariance `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = rotation_matrix_raw(&self.rot);
        let s2 = Matrix3::from_diagonal(&Vector3::from(self.scale.map(|s| s * s)));
        r * s2 * r.transpose()
    }
}

/// Gradient of `R diag(s^2) R^T` pulled back to the raw quaternion and scale.
pub fn covariance_backward(rot: &Quat, scale: &[f64; 3], d_cov: &Matrix3<f64>) -> (Quat, [f64; 3]) {
    let r = rotation_matrix_raw(rot);
    // cov = M M^T with M = R diag(s)
    let m = r * Matrix3::from_diagonal(&Vector3::from(*scale));
    let d_m = (d_cov + d_cov.transpose()) * m;
    let mut d_r = Matrix3::zeros();
    let mut d_s = [0.0; 3];
    for j in 0..3 {
        for i in 0..3 {
            d_r[(i, j)] = d_m[(i, j)] * scale[j];
            d_s[j] += d_m[(i, j)] * r[(i, j)];
        }
    }
    (rotation_matrix_raw_backward(rot, &d_r), d_s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Violation {
    RotationNorm,
    ScalePositivity,
    OpacityRange,
    MaskRange,
    FeatureWidth,
    NonFinite,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::RotationNorm => "rotation norm",
            Violation::ScalePositivity => "scale positivity",
            Violation::OpacityRange => "opacity range",
            Violation::MaskRange => "mask range",
            Violation::FeatureWidth => "feature width",
            Violation::NonFinite => "non-finite value",
        };
        f.write_str(s)
    }
}

/// Every violated invariant of `g`; empty iff valid.
pub fn validate_gaussian(g: &GaussianPrimitive, feat_dim: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let finite = g.mu.iter().all(|v| v.is_finite())
        && g.rot.iter().all(|v| v.is_finite())
        && g.scale.iter().all(|v| v.is_finite())
        && g.opacity.is_finite()
        && g.mask.is_finite()
        && g.feat.iter().all(|v| v.is_finite());
    if !finite {
        out.push(Violation::NonFinite);
    }
    if (quat_norm(&g.rot) - 1.0).abs() > 1e-6 {
        out.push(Violation::RotationNorm);
    }
    if !g.scale.iter().all(|&s| s > 0.0) {
        out.push(Violation::ScalePositivity);
    }
    if !(0.0..=1.0).contains(&g.opacity) {
        out.push(Violation::OpacityRange);
    }
    if !(0.0..=1.0).contains(&g.mask) {
        out.push(Violation::MaskRange);
    }
    if g.feat.len() != feat_dim {
        out.push(Violation::FeatureWidth);
    }
    out
}

/// Per-Gaussian gradient with the same fields as [`GaussianPrimitive`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: [f64; 3],
    pub rot: Quat,
    pub scale: [f64; 3],
    pub opacity: f64,
    pub feat: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(feat_dim: usize) -> Self {
        GaussianGrad {
            feat: vec![0.0; feat_dim],
            ..Default::default()
        }
    }

    pub fn add_assign(&mut self, other: &GaussianGrad) {
        for k in 0..3 {
            self.mu[k] += other.mu[k];
            self.scale[k] += other.scale[k];
        }
        for k in 0..4 {
            self.rot[k] += other.rot[k];
        }
        self.opacity += other.opacity;
        if self.feat.len() < other.feat.len() {
            self.feat.resize(other.feat.len(), 0.0);
        }
        for (a, b) in self.feat.iter_mut().zip(&other.feat) {
            *a += b;
        }
    }
}
