//! Gaussian-to-voxel splatting and the occupancy/semantic heads.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::gaussian::{GaussianGrad, GaussianPrimitive};
use crate::geom::grid::{FeatureVolume, SemanticLabelGrid, VoxelGridSpec, FREE};
use crate::geom::quat::{rotation_matrix_raw, rotation_matrix_raw_backward};
use crate::nn::{join, sigmoid, softmax, Linear, Params};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplatConfig {
    pub truncation_sigma: f64,
    pub weight_epsilon: f64,
    pub occupancy_threshold: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        SplatConfig {
            truncation_sigma: 3.0,
            weight_epsilon: 1e-8,
            occupancy_threshold: 0.5,
        }
    }
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.truncation_sigma > 0.0) || !(self.weight_epsilon > 0.0) {
            return Err(Error::Invalid("truncation_sigma and weight_epsilon must be > 0".into()));
        }
        if !(self.occupancy_threshold > 0.0 && self.occupancy_threshold < 1.0) {
            return Err(Error::Invalid("occupancy_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Whitening map `A = diag(1/s) R^T`, so the squared Mahalanobis distance is `|A d|^2`.
fn whitening(g: &GaussianPrimitive) -> Matrix3<f64> {
    let r = rotation_matrix_raw(&g.rot);
    Matrix3::from_diagonal(&Vector3::from(g.scale.map(|s| 1.0 / s))) * r.transpose()
}

/// `opacity * exp(-q/2)` with `q` the squared Mahalanobis distance; zero beyond
/// `truncation_sigma`.
pub fn gaussian_density(g: &GaussianPrimitive, point: [f64; 3], truncation_sigma: f64) -> f64 {
    let d = Vector3::from(point) - g.mean();
    let q = (whitening(g) * d).norm_squared();
    if q > truncation_sigma * truncation_sigma {
        0.0
    } else {
        g.opacity * (-0.5 * q).exp()
    }
}

/// Inclusive voxel index range on each axis whose centers lie inside the
/// axis-aligned box of the truncation ellipsoid; `None` if empty.
fn voxel_range(g: &GaussianPrimitive, spec: &VoxelGridSpec, truncation_sigma: f64) -> Option<[(usize, usize); 3]> {
    let cov = g.covariance();
    let mut out = [(0, 0); 3];
    for k in 0..3 {
        let e = truncation_sigma * cov[(k, k)].sqrt();
        let lo = ((g.mu[k] - e - spec.min_corner[k]) / spec.voxel_size - 0.5).ceil();
        let hi = ((g.mu[k] + e - spec.min_corner[k]) / spec.voxel_size - 0.5).floor();
        let lo = lo.max(0.0);
        let hi = hi.min(spec.dims[k] as f64 - 1.0);
        if !(lo <= hi) {
            return None;
        }
        out[k] = (lo as usize, hi as usize);
    }
    Some(out)
}

fn for_each_touched<F: FnMut(usize, f64, f64)>(g: &GaussianPrimitive, spec: &VoxelGridSpec, trunc: f64, mut f: F) {
    let Some(range) = voxel_range(g, spec, trunc) else {
        return;
    };
    let a = whitening(g);
    let mu = g.mean();
    for x in range[0].0..=range[0].1 {
        for y in range[1].0..=range[1].1 {
            for z in range[2].0..=range[2].1 {
                let d = Vector3::from(spec.voxel_center([x, y, z])) - mu;
                let q = (a * d).norm_squared();
                if q <= trunc * trunc {
                    f(spec.linear_index([x, y, z]), q, g.opacity * (-0.5 * q).exp());
                }
            }
        }
    }
}

/// Weighted feature average per voxel center; Gaussians are accumulated in
/// list order.
pub fn splat_features(gaussians: &[GaussianPrimitive], spec: &VoxelGridSpec, config: &SplatConfig) -> FeatureVolume {
    let channels = gaussians.first().map_or(0, |g| g.feat.len());
    let mut vol = FeatureVolume::zeros(spec.clone(), channels);
    for g in gaussians {
        for_each_touched(g, spec, config.truncation_sigma, |v, _, w| {
            vol.weight[v] += w;
            for (acc, f) in vol.data[v * channels..(v + 1) * channels].iter_mut().zip(&g.feat) {
                *acc += w * f;
            }
        });
    }
    for v in 0..spec.num_voxels() {
        let denom = vol.weight[v] + config.weight_epsilon;
        vol.data[v * channels..(v + 1) * channels]
            .iter_mut()
            .for_each(|x| *x /= denom);
    }
    vol
}

/// Gradients of a scalar w.r.t. the Gaussians given its gradients w.r.t. the
/// volume's `data` and `weight`.
pub fn splat_features_backward(
    gaussians: &[GaussianPrimitive],
    volume: &FeatureVolume,
    config: &SplatConfig,
    d_data: &[f64],
    d_weight: &[f64],
) -> Vec<GaussianGrad> {
    let spec = &volume.spec;
    let c = volume.channels;
    // d/dS and d/dW of data = S / (W + eps)
    let mut d_sum = vec![0.0; d_data.len()];
    let mut d_total = d_weight.to_vec();
    for v in 0..spec.num_voxels() {
        let denom = volume.weight[v] + config.weight_epsilon;
        let mut dot = 0.0;
        for k in 0..c {
            d_sum[v * c + k] = d_data[v * c + k] / denom;
            dot += d_data[v * c + k] * volume.data[v * c + k];
        }
        d_total[v] -= dot / denom;
    }
    gaussians
        .iter()
        .map(|g| {
            let mut grad = GaussianGrad::zeros(g.feat.len());
            let r = rotation_matrix_raw(&g.rot);
            let inv_s2 = g.scale.map(|s| 1.0 / (s * s));
            let p = r * Matrix3::from_diagonal(&Vector3::from(inv_s2)) * r.transpose();
            let mu = g.mean();
            let mut d_p = Matrix3::zeros();
            for_each_touched(g, spec, config.truncation_sigma, |v, q, w| {
                let ds = &d_sum[v * c..(v + 1) * c];
                let mut dw = d_total[v];
                for k in 0..c {
                    grad.feat[k] += w * ds[k];
                    dw += ds[k] * g.feat[k];
                }
                grad.opacity += dw * (-0.5 * q).exp();
                let dq = -0.5 * w * dw;
                let d = Vector3::from(spec.voxel_center(v_index(spec, v))) - mu;
                let dmu = -2.0 * dq * (p * d);
                for a in 0..3 {
                    grad.mu[a] += dmu[a];
                }
                d_p += dq * d * d.transpose();
            });
            // P = R diag(1/s^2) R^T
            let dinv = Matrix3::from_diagonal(&Vector3::from(inv_s2));
            let d_r = (d_p + d_p.transpose()) * r * dinv;
            let rt_dp_r = r.transpose() * d_p * r;
            for j in 0..3 {
                grad.scale[j] = rt_dp_r[(j, j)] * (-2.0 / g.scale[j].powi(3));
            }
            grad.rot = rotation_matrix_raw_backward(&g.rot, &d_r);
            grad
        })
        .collect()
}

fn v_index(spec: &VoxelGridSpec, linear: usize) -> [usize; 3] {
    spec.unravel(linear)
}

/// Linear heads over `f_x = [data(x); weight(x)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHeads {
    pub w_occ: Linear,
    pub w_sem: Linear,
}

/// Initial gain of the occupancy head on the splat-weight channel.
pub const OCC_DENSITY_GAIN: f64 = 8.0;

impl PredictionHeads {
    /// `w_occ` starts as a density reader: `sigmoid(gain * (weight - 0.5))`.
    /// `w_sem` reads the feature block only.
    pub fn new<R: Rng>(feat_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut w_occ = Linear::zeros(feat_dim + 1, 1);
        w_occ.weight[(0, feat_dim)] = OCC_DENSITY_GAIN;
        w_occ.bias[0] = -OCC_DENSITY_GAIN * 0.5;
        let mut w_sem = Linear::uniform(feat_dim + 1, num_classes, rng);
        w_sem.weight.column_mut(feat_dim).fill(0.0);
        PredictionHeads { w_occ, w_sem }
    }

    pub fn zeros(feat_dim: usize, num_classes: usize) -> Self {
        PredictionHeads {
            w_occ: Linear::zeros(feat_dim + 1, 1),
            w_sem: Linear::zeros(feat_dim + 1, num_classes),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.w_sem.in_dim() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.w_sem.out_dim()
    }

    /// Semantic logits of one Gaussian: `w_sem . [feat; 0] + b`.
    pub fn gaussian_logits(&self, feat: &[f64]) -> Result<Vec<f64>> {
        let mut x = feat.to_vec();
        x.push(0.0);
        self.w_sem.forward(&x)
    }

    /// Returns the gradient w.r.t. `feat` and accumulates into `grad.w_sem`.
    pub fn gaussian_logits_backward(&self, feat: &[f64], d_logits: &[f64], grad: &mut PredictionHeads) -> Vec<f64> {
        let mut x = feat.to_vec();
        x.push(0.0);
        let mut dx = self.w_sem.backward(&x, d_logits, &mut grad.w_sem);
        dx.pop();
        dx
    }
}

impl Params for PredictionHeads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.w_occ.visit(&join(prefix, "w_occ"), f);
        self.w_sem.visit(&join(prefix, "w_sem"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.w_occ.visit_mut(&join(prefix, "w_occ"), f);
        self.w_sem.visit_mut(&join(prefix, "w_sem"), f);
    }
}

fn head_input(volume: &FeatureVolume, v: usize) -> Vec<f64> {
    let mut x = volume.feature(v).to_vec();
    x.push(volume.weight[v]);
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub spec: VoxelGridSpec,
    pub values: Vec<f64>,
}

/// `num_voxels x classes`, voxel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGrid {
    pub spec: VoxelGridSpec,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl SemanticGrid {
    pub fn probs_at(&self, v: usize) -> &[f64] {
        &self.probs[v * self.classes..(v + 1) * self.classes]
    }
}

pub fn occupancy_head(volume: &FeatureVolume, heads: &PredictionHeads) -> Result<OccupancyGrid> {
    if heads.w_occ.in_dim() != volume.channels + 1 {
        return Err(Error::shape("occupancy head input", heads.w_occ.in_dim(), volume.channels + 1));
    }
    let values = (0..volume.spec.num_voxels())
        .map(|v| Ok(sigmoid(heads.w_occ.forward(&head_input(volume, v))?[0])))
        .collect::<Result<_>>()?;
    Ok(OccupancyGrid {
        spec: volume.spec.clone(),
        values,
    })
}

pub fn semantic_head(volume: &FeatureVolume, heads: &PredictionHeads) -> Result<SemanticGrid> {
    if heads.w_sem.in_dim() != volume.channels + 1 {
        return Err(Error::shape("semantic head input", heads.w_sem.in_dim(), volume.channels + 1));
    }
    let mut probs = Vec::with_capacity(volume.spec.num_voxels() * heads.num_classes());
    for v in 0..volume.spec.num_voxels() {
        probs.extend(softmax(&heads.w_sem.forward(&head_input(volume, v))?));
    }
    Ok(SemanticGrid {
        spec: volume.spec.clone(),
        classes: heads.num_classes(),
        probs,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn extract_occupancy(p_occ: &OccupancyGrid, p_sem: &SemanticGrid, threshold: f64) -> Result<SemanticLabelGrid> {
    p_occ.spec.ensure_same(&p_sem.spec)?;
    let labels = (0..p_occ.spec.num_voxels())
        .map(|v| {
            if p_occ.values[v] >= threshold {
                argmax(p_sem.probs_at(v)) as u8
            } else {
                FREE
            }
        })
        .collect();
    Ok(SemanticLabelGrid {
        spec: p_occ.spec.clone(),
        labels,
    })
}

/// Splat, apply both heads and threshold.
pub fn predict_labels(
    gaussians: &[GaussianPrimitive],
    spec: &VoxelGridSpec,
    heads: &PredictionHeads,
    config: &SplatConfig,
) -> Result<SemanticLabelGrid> {
    let mut vol = splat_features(gaussians, spec, config);
    if gaussians.is_empty() {
        vol = FeatureVolume::zeros(spec.clone(), heads.feat_dim());
    }
    let occ = occupancy_head(&vol, heads)?;
    let sem = semantic_head(&vol, heads)?;
    extract_occupancy(&occ, &sem, config.occupancy_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::grid::make_grid_spec;
    use crate::geom::quat::normalize_quaternion;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_gaussian<R: Rng>(rng: &mut R, spec: &VoxelGridSpec, c: usize) -> GaussianPrimitive {
        GaussianPrimitive {
            mu: std::array::from_fn(|k| rng.gen_range(spec.min_corner[k]..spec.max_corner[k])),
            rot: normalize_quaternion(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).unwrap(),
            scale: std::array::from_fn(|_| rng.gen_range(0.3..0.9)),
            opacity: rng.gen_range(0.2..0.9),
            feat: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mask: 0.0,
        }
    }

    #[test]
    fn density_examples() {
        let g = GaussianPrimitive::isotropic([1.0, 2.0, 3.0], 1.0, 0.7, vec![]);
        assert_eq!(gaussian_density(&g, [1.0, 2.0, 3.0], 3.0), 0.7);
        let g = GaussianPrimitive::isotropic([0.0; 3], 1.0, 1.0, vec![]);
        assert!((gaussian_density(&g, [0.0, 1.0, 0.0], 3.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_density(&g, [0.0, 1.0, 0.0], 3.0) - 0.60653).abs() < 1e-5);
        let g = GaussianPrimitive::isotropic([0.0; 3], 2.0, 0.5, vec![]);
        assert!((gaussian_density(&g, [0.0, 0.0, 1.5], 3.0) - 0.5 * (-1.5f64 * 1.5 / 8.0).exp()).abs() < 1e-15);
        let g = GaussianPrimitive::isotropic([0.0; 3], 1.0, 1.0, vec![]);
        assert_eq!(gaussian_density(&g, [3.01, 0.0, 0.0], 3.0), 0.0);
    }

    #[test]
    fn splat_examples() {
        let spec = make_grid_spec([0.0; 3], [4.0, 4.0, 2.0], 1.0).unwrap();
        let cfg = SplatConfig::default();
        let g = GaussianPrimitive::isotropic([1.5, 2.5, 0.5], 0.4, 0.6, vec![1.0, -2.0]);
        let vol = splat_features(std::slice::from_ref(&g), &spec, &cfg);
        let v = spec.linear_index([1, 2, 0]);
        assert_eq!(vol.weight[v], 0.6);
        let f = 0.6 / (0.6 + 1e-8);
        assert!((vol.feature(v)[0] - f).abs() < 1e-15 && (vol.feature(v)[1] + 2.0 * f).abs() < 1e-15);

        let empty = splat_features(&[], &spec, &cfg);
        assert!(empty.data.iter().chain(&empty.weight).all(|&x| x == 0.0));
    }

    #[test]
    fn splat_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = make_grid_spec([0.0; 3], [4.0, 4.0, 2.0], 1.0).unwrap();
        let cfg = SplatConfig::default();
        let gs: Vec<_> = (0..5).map(|_| random_gaussian(&mut rng, &spec, 3)).collect();
        let vol = splat_features(&gs, &spec, &cfg);
        for v in 0..spec.num_voxels() {
            let x = spec.voxel_center(spec.unravel(v));
            let ws: Vec<f64> = gs.iter().map(|g| gaussian_density(g, x, 3.0)).collect();
            let w: f64 = ws.iter().sum();
            assert!((vol.weight[v] - w).abs() < 1e-12);
            for k in 0..3 {
                let want = ws.iter().zip(&gs).map(|(w, g)| w * g.feat[k]).sum::<f64>() / (w + 1e-8);
                assert!((vol.feature(v)[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_examples() {
        let spec = make_grid_spec([0.0; 3], [2.0, 1.0, 1.0], 1.0).unwrap();
        let vol = FeatureVolume::zeros(spec.clone(), 3);
        let heads = PredictionHeads::zeros(3, 15);
        assert!(occupancy_head(&vol, &heads).unwrap().values.iter().all(|&p| p == 0.5));
        let sem = semantic_head(&vol, &heads).unwrap();
        assert!(sem.probs.iter().all(|&p| (p - 1.0 / 15.0).abs() < 1e-15));

        let mut heads = PredictionHeads::zeros(3, 15);
        heads.w_occ.bias[0] = 3f64.ln();
        heads.w_sem.bias[4] = 20.0;
        assert!((occupancy_head(&vol, &heads).unwrap().values[0] - 0.75).abs() < 1e-15);
        let sem = semantic_head(&vol, &heads).unwrap();
        assert!(sem.probs_at(1)[4] > 1.0 - 1e-6);
        for v in 0..2 {
            assert!((sem.probs_at(v).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(occupancy_head(&FeatureVolume::zeros(spec, 4), &heads).is_err());
    }

    #[test]
    fn extract_examples() {
        let spec = make_grid_spec([0.0; 3], [3.0, 1.0, 1.0], 1.0).unwrap();
        let mut occ = OccupancyGrid {
            spec: spec.clone(),
            values: vec![0.0; 3],
        };
        let mut probs = vec![0.0; 3 * 15];
        probs[15 + 3] = 1.0;
        probs[2 * 15 + 2] = 0.5;
        probs[2 * 15 + 7] = 0.5;
        let sem = SemanticGrid {
            spec: spec.clone(),
            classes: 15,
            probs,
        };
        assert!(extract_occupancy(&occ, &sem, 0.5).unwrap().labels.iter().all(|&l| l == FREE));
        occ.values = vec![0.0, 1.0, 1.0];
        assert_eq!(extract_occupancy(&occ, &sem, 0.5).unwrap().labels, vec![FREE, 3, 2]);
        let other = make_grid_spec([0.0; 3], [3.0, 2.0, 1.0], 1.0).unwrap();
        let bad = OccupancyGrid {
            spec: other,
            values: vec![0.0; 6],
        };
        assert!(matches!(extract_occupancy(&bad, &sem, 0.5), Err(Error::SpecMismatch(_))));
    }

    #[test]
    fn density_reader_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = PredictionHeads::new(4, 15, &mut rng);
        let spec = make_grid_spec([0.0; 3], [2.0, 1.0, 1.0], 1.0).unwrap();
        let mut vol = FeatureVolume::zeros(spec, 4);
        vol.weight = vec![0.9, 0.1];
        let occ = occupancy_head(&vol, &heads).unwrap();
        assert!(occ.values[0] > 0.5 && occ.values[1] < 0.5);
        let l = heads.gaussian_logits(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(l.len(), 15);
    }
}
