//! Perspective projection of Gaussians and front-to-back alpha compositing of
//! arbitrary per-Gaussian payloads.

use std::io::{Read, Write};

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binio::{read_f32s, read_u32, write_f32s, write_u32};
use crate::geom::camera::CameraModel;
use crate::geom::gaussian::{covariance_backward, GaussianGrad, GaussianPrimitive};
use crate::geom::grid::read_exact_or_truncated;
use crate::{Error, Result};

pub const NEAR_PLANE: f64 = 0.01;
pub const COV_FLOOR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
/// Pixels below this accumulated alpha carry no surface evidence.
pub const MIN_VALID_ALPHA: f64 = 0.01;
pub const DEPTH_EPSILON: f64 = 1e-8;
pub const IMG_MAGIC: &[u8; 9] = b"DEGO-IMG1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Skip Gaussian/pixel pairs beyond this Mahalanobis radius. `None`
    /// evaluates every pair.
    pub cutoff_sigma: Option<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { cutoff_sigma: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected2D {
    pub center: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    /// Camera-space z in meters.
    pub depth: f64,
}

/// Jacobian of the pinhole projection at camera point `p`.
fn projection_jacobian(k: &[[f64; 3]; 3], p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    let z2 = z * z;
    Matrix2x3::new(
        k[0][0] / z,
        k[0][1] / z,
        -(k[0][0] * x + k[0][1] * y) / z2,
        k[1][0] / z,
        k[1][1] / z,
        -(k[1][0] * x + k[1][1] * y) / z2,
    )
}

/// Projects `g` through `camera`; `None` when it lies at or behind the near plane.
pub fn project_gaussian(g: &GaussianPrimitive, camera: &CameraModel) -> Option<Projected2D> {
    let pc = camera.world_to_camera(&g.mean());
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let j = projection_jacobian(&camera.k, &pc);
    let m = j * camera.rotation();
    let cov = m * g.covariance() * m.transpose() + Matrix2::identity() * COV_FLOOR;
    Some(Projected2D {
        center: camera.project_camera_point(&pc),
        cov2d: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        depth: pc.z,
    })
}

/// Gradient w.r.t. `mu`, `rot` and `scale` of a scalar with the given
/// gradients on the projected center, covariance and depth.
pub fn project_gaussian_backward(
    g: &GaussianPrimitive,
    camera: &CameraModel,
    d_center: [f64; 2],
    d_cov: &Matrix2<f64>,
    d_depth: f64,
) -> GaussianGrad {
    let w = camera.rotation();
    let pc = camera.world_to_camera(&g.mean());
    let k = &camera.k;
    let j = projection_jacobian(k, &pc);
    let m = j * w;
    let sigma = g.covariance();
    let d_sigma = m.transpose() * d_cov * m;
    let d_m = (d_cov + d_cov.transpose()) * m * sigma;
    let d_j = d_m * w.transpose();

    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (z2, z3) = (z * z, z * z * z);
    let mut d_pc = j.transpose() * Vector2::from(d_center);
    d_pc.z += d_depth;
    for r in 0..2 {
        let (a, b) = (k[r][0], k[r][1]);
        d_pc.z += -a / z2 * d_j[(r, 0)] - b / z2 * d_j[(r, 1)];
        d_pc.x += -a / z2 * d_j[(r, 2)];
        d_pc.y += -b / z2 * d_j[(r, 2)];
        d_pc.z += 2.0 * (a * x + b * y) / z3 * d_j[(r, 2)];
    }
    let d_mu = w.transpose() * d_pc;
    let (d_rot, d_scale) = covariance_backward(&g.rot, &g.scale, &d_sigma);
    GaussianGrad {
        mu: [d_mu.x, d_mu.y, d_mu.z],
        rot: d_rot,
        scale: d_scale,
        opacity: 0.0,
        feat: Vec::new(),
    }
}

/// Composited payload and accumulated alpha, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedMaps {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `height * width * channels`.
    pub payload: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderedMaps {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        RenderedMaps {
            height,
            width,
            channels,
            payload: vec![0.0; height * width * channels],
            alpha: vec![0.0; height * width],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let p = (row * self.width + col) * self.channels;
        &self.payload[p..p + self.channels]
    }

    /// Alpha-normalized single-channel map (used for depth).
    pub fn normalized(&self) -> Vec<f64> {
        assert_eq!(self.channels, 1);
        self.payload
            .iter()
            .zip(&self.alpha)
            .map(|(p, a)| p / (a + DEPTH_EPSILON))
            .collect()
    }

    /// Columns `[start, start + len)` of the payload as separate maps.
    pub fn split(&self, start: usize, len: usize) -> RenderedMaps {
        let mut payload = Vec::with_capacity(self.height * self.width * len);
        for px in 0..self.height * self.width {
            let base = px * self.channels + start;
            payload.extend_from_slice(&self.payload[base..base + len]);
        }
        RenderedMaps {
            height: self.height,
            width: self.width,
            channels: len,
            payload,
            alpha: self.alpha.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Splat2 {
    index: usize,
    center: [f64; 2],
    /// Inverse covariance entries (a, b, c) of `[[a, b], [b, c]]`.
    inv: [f64; 3],
    opacity: f64,
}

impl Splat2 {
    fn power(&self, u: f64, v: f64) -> (f64, [f64; 2]) {
        let d = [u - self.center[0], v - self.center[1]];
        let [a, b, c] = self.inv;
        (-0.5 * (a * d[0] * d[0] + 2.0 * b * d[0] * d[1] + c * d[1] * d[1]), d)
    }
}

struct Prepared {
    splats: Vec<Splat2>,
    /// Sorted splat indices touching each pixel; `None` means all of them.
    bins: Option<Vec<Vec<u32>>>,
}

fn prepare(gaussians: &[GaussianPrimitive], camera: &CameraModel, config: &RenderConfig) -> (Vec<Option<Projected2D>>, Prepared) {
    let projected: Vec<Option<Projected2D>> = gaussians.iter().map(|g| project_gaussian(g, camera)).collect();
    let mut order: Vec<usize> = (0..gaussians.len()).filter(|&i| projected[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (projected[a].unwrap().depth, projected[b].unwrap().depth);
        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let splats: Vec<Splat2> = order
        .iter()
        .map(|&i| {
            let p = projected[i].unwrap();
            let [[a, b], [_, c]] = p.cov2d;
            let det = a * c - b * b;
            Splat2 {
                index: i,
                center: p.center,
                inv: [c / det, -b / det, a / det],
                opacity: gaussians[i].opacity,
            }
        })
        .collect();
    let bins = config.cutoff_sigma.map(|k| {
        let (w, h) = (camera.width, camera.height);
        let mut bins = vec![Vec::new(); w * h];
        for (s, sp) in splats.iter().enumerate() {
            let p = projected[sp.index].unwrap();
            let ex = k * p.cov2d[0][0].sqrt();
            let ey = k * p.cov2d[1][1].sqrt();
            let c0 = (p.center[0] - ex - 0.5).ceil().max(0.0);
            let c1 = (p.center[0] + ex - 0.5).floor().min(w as f64 - 1.0);
            let r0 = (p.center[1] - ey - 0.5).ceil().max(0.0);
            let r1 = (p.center[1] + ey - 0.5).floor().min(h as f64 - 1.0);
            if !(c0 <= c1 && r0 <= r1) {
                continue;
            }
            for r in r0 as usize..=r1 as usize {
                for c in c0 as usize..=c1 as usize {
                    bins[r * w + c].push(s as u32);
                }
            }
        }
        bins
    });
    (projected, Prepared { splats, bins })
}

/// One contributing splat at a pixel.
struct Contribution {
    splat: usize,
    alpha: f64,
    gauss: f64,
    delta: [f64; 2],
    clamped: bool,
}

fn pixel_contributions(prep: &Prepared, px: usize, u: f64, v: f64, cutoff: Option<f64>, out: &mut Vec<Contribution>) {
    out.clear();
    let mut visit = |s: usize| {
        let sp = &prep.splats[s];
        let (power, delta) = sp.power(u, v);
        if let Some(k) = cutoff {
            if -2.0 * power > k * k {
                return;
            }
        }
        let gauss = power.exp();
        let raw = sp.opacity * gauss;
        let alpha = raw.clamp(0.0, ALPHA_MAX);
        out.push(Contribution {
            splat: s,
            alpha,
            gauss,
            delta,
            clamped: raw > ALPHA_MAX,
        });
    };
    match &prep.bins {
        Some(bins) => bins[px].iter().for_each(|&s| visit(s as usize)),
        None => (0..prep.splats.len()).for_each(&mut visit),
    }
}

fn check_payloads(gaussians: &[GaussianPrimitive], payloads: &Array2<f64>) -> Result<()> {
    if payloads.nrows() != gaussians.len() {
        return Err(Error::PayloadShapeMismatch {
            expected: gaussians.len(),
            actual: payloads.nrows(),
        });
    }
    Ok(())
}

/// Depth-sorted front-to-back compositing of `payloads` (one row per Gaussian).
pub fn render_maps(
    gaussians: &[GaussianPrimitive],
    payloads: &Array2<f64>,
    camera: &CameraModel,
    config: &RenderConfig,
) -> Result<RenderedMaps> {
    check_payloads(gaussians, payloads)?;
    let (h, w, p) = (camera.height, camera.width, payloads.ncols());
    let mut maps = RenderedMaps::zeros(h, w, p);
    let (_, prep) = prepare(gaussians, camera, config);
    let mut contribs = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let px = row * w + col;
            pixel_contributions(&prep, px, col as f64 + 0.5, row as f64 + 0.5, config.cutoff_sigma, &mut contribs);
            let out = &mut maps.payload[px * p..(px + 1) * p];
            let mut t = 1.0;
            for c in &contribs {
                let weight = t * c.alpha;
                let rowp = payloads.row(prep.splats[c.splat].index);
                for k in 0..p {
                    out[k] += weight * rowp[k];
                }
                t *= 1.0 - c.alpha;
            }
            maps.alpha[px] = 1.0 - t;
        }
    }
    Ok(maps)
}

/// Gradients of a scalar through [`render_maps`]: per-Gaussian geometry and
/// opacity gradients, and payload-row gradients.
pub fn render_maps_backward(
    gaussians: &[GaussianPrimitive],
    payloads: &Array2<f64>,
    camera: &CameraModel,
    config: &RenderConfig,
    d_payload: &[f64],
    d_alpha: &[f64],
) -> Result<(Vec<GaussianGrad>, Array2<f64>)> {
    check_payloads(gaussians, payloads)?;
    let (h, w, p) = (camera.height, camera.width, payloads.ncols());
    let n = gaussians.len();
    let (projected, prep) = prepare(gaussians, camera, config);
    let mut d_rows = Array2::<f64>::zeros((n, p));
    let mut d_center = vec![[0.0f64; 2]; n];
    let mut d_inv = vec![[0.0f64; 3]; n];
    let mut d_opacity = vec![0.0; n];
    let mut contribs = Vec::new();
    let mut transmittance = Vec::new();
    let mut suffix = vec![0.0; p];
    for row in 0..h {
        for col in 0..w {
            let px = row * w + col;
            pixel_contributions(&prep, px, col as f64 + 0.5, row as f64 + 0.5, config.cutoff_sigma, &mut contribs);
            if contribs.is_empty() {
                continue;
            }
            let d_c = &d_payload[px * p..(px + 1) * p];
            let d_a = d_alpha[px];
            transmittance.clear();
            let mut t = 1.0;
            for c in &contribs {
                transmittance.push(t);
                t *= 1.0 - c.alpha;
            }
            let t_final = t;
            suffix.iter_mut().for_each(|s| *s = 0.0);
            for (c, &t_i) in contribs.iter().zip(&transmittance).rev() {
                let sp = &prep.splats[c.splat];
                let gi = sp.index;
                let rowp = payloads.row(gi);
                let one_minus = 1.0 - c.alpha;
                let mut d_alpha_i = d_a * t_final / one_minus;
                for k in 0..p {
                    d_alpha_i += d_c[k] * (t_i * rowp[k] - suffix[k] / one_minus);
                    d_rows[(gi, k)] += t_i * c.alpha * d_c[k];
                    suffix[k] += t_i * c.alpha * rowp[k];
                }
                if c.clamped {
                    continue;
                }
                d_opacity[gi] += d_alpha_i * c.gauss;
                // alpha = o exp(-d^T M d / 2)
                let d_power = d_alpha_i * sp.opacity * c.gauss;
                let [a, b, cc] = sp.inv;
                let md = [a * c.delta[0] + b * c.delta[1], b * c.delta[0] + cc * c.delta[1]];
                d_center[gi][0] += d_power * md[0];
                d_center[gi][1] += d_power * md[1];
                d_inv[gi][0] += -0.5 * d_power * c.delta[0] * c.delta[0];
                d_inv[gi][1] += -d_power * c.delta[0] * c.delta[1];
                d_inv[gi][2] += -0.5 * d_power * c.delta[1] * c.delta[1];
            }
        }
    }
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let Some(proj) = projected[i] else {
            grads.push(GaussianGrad::zeros(0));
            continue;
        };
        // M = cov^-1; dL/dcov = -M (dL/dM) M with dL/dM symmetric
        let [[ca, cb], [_, cc]] = proj.cov2d;
        let det = ca * cc - cb * cb;
        let m = Matrix2::new(cc / det, -cb / det, -cb / det, ca / det);
        let dm = Matrix2::new(d_inv[i][0], 0.5 * d_inv[i][1], 0.5 * d_inv[i][1], d_inv[i][2]);
        let d_cov = -(m * dm * m);
        let mut g = project_gaussian_backward(&gaussians[i], camera, d_center[i], &d_cov, 0.0);
        g.opacity = d_opacity[i];
        grads.push(g);
    }
    Ok((grads, d_rows))
}

/// Semantic, depth and (optionally) feature maps from a single compositing pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AllMaps {
    pub semantic: RenderedMaps,
    /// Raw composited depth; see [`RenderedMaps::normalized`].
    pub depth: RenderedMaps,
    pub features: Option<RenderedMaps>,
    pub alpha: Vec<f64>,
}

/// Camera depth of every Gaussian (zero when culled).
pub fn depth_payload(gaussians: &[GaussianPrimitive], camera: &CameraModel) -> Array2<f64> {
    Array2::from_shape_fn((gaussians.len(), 1), |(i, _)| {
        let z = camera.world_to_camera(&gaussians[i].mean()).z;
        if z > NEAR_PLANE {
            z
        } else {
            0.0
        }
    })
}

fn stack_payloads(
    gaussians: &[GaussianPrimitive],
    semantic: &Array2<f64>,
    features: Option<&Array2<f64>>,
    camera: &CameraModel,
) -> Result<Array2<f64>> {
    check_payloads(gaussians, semantic)?;
    let depth = depth_payload(gaussians, camera);
    let mut parts = vec![semantic.view(), depth.view()];
    if let Some(f) = features {
        check_payloads(gaussians, f)?;
        parts.push(f.view());
    }
    Ok(ndarray::concatenate(ndarray::Axis(1), &parts).expect("equal row counts"))
}

pub fn render_all(
    gaussians: &[GaussianPrimitive],
    semantic: &Array2<f64>,
    features: Option<&Array2<f64>>,
    camera: &CameraModel,
    config: &RenderConfig,
) -> Result<AllMaps> {
    let stacked = stack_payloads(gaussians, semantic, features, camera)?;
    let maps = render_maps(gaussians, &stacked, camera, config)?;
    let c = semantic.ncols();
    Ok(AllMaps {
        semantic: maps.split(0, c),
        depth: maps.split(c, 1),
        features: features.map(|f| maps.split(c + 1, f.ncols())),
        alpha: maps.alpha,
    })
}

/// Upstream gradients for [`render_all_backward`], in the layout of [`AllMaps`].
pub struct AllMapsGrad {
    pub semantic: Vec<f64>,
    /// Gradient on the raw composited depth.
    pub depth: Vec<f64>,
    pub features: Option<Vec<f64>>,
    pub alpha: Vec<f64>,
}

/// Returns Gaussian gradients (depth payload chained into `mu`), semantic
/// payload gradients and feature payload gradients.
pub fn render_all_backward(
    gaussians: &[GaussianPrimitive],
    semantic: &Array2<f64>,
    features: Option<&Array2<f64>>,
    camera: &CameraModel,
    config: &RenderConfig,
    grad: &AllMapsGrad,
) -> Result<(Vec<GaussianGrad>, Array2<f64>, Option<Array2<f64>>)> {
    let stacked = stack_payloads(gaussians, semantic, features, camera)?;
    let (c, p) = (semantic.ncols(), stacked.ncols());
    let npx = camera.num_pixels();
    let mut d_payload = vec![0.0; npx * p];
    for px in 0..npx {
        let dst = &mut d_payload[px * p..(px + 1) * p];
        dst[..c].copy_from_slice(&grad.semantic[px * c..(px + 1) * c]);
        dst[c] = grad.depth[px];
        if let (Some(f), Some(df)) = (features, &grad.features) {
            let cf = f.ncols();
            dst[c + 1..].copy_from_slice(&df[px * cf..(px + 1) * cf]);
        }
    }
    let (mut grads, d_rows) = render_maps_backward(gaussians, &stacked, camera, config, &d_payload, &grad.alpha)?;
    let rot_z = camera.rotation().row(2).transpose();
    for (i, g) in grads.iter_mut().enumerate() {
        let dz = d_rows[(i, c)];
        if dz != 0.0 && stacked[(i, c)] != 0.0 {
            for a in 0..3 {
                g.mu[a] += dz * rot_z[a];
            }
        }
    }
    let d_sem = d_rows.slice(ndarray::s![.., 0..c]).to_owned();
    let d_feat = features.map(|_| d_rows.slice(ndarray::s![.., c + 1..]).to_owned());
    Ok((grads, d_sem, d_feat))
}

/// Float image in the DEGO-IMG1 format: `H x W x P` little-endian f32, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn from_f64(height: usize, width: usize, channels: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), height * width * channels);
        FloatImage {
            height,
            width,
            channels,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(IMG_MAGIC)?;
        write_u32(&mut out, self.height as u32)?;
        write_u32(&mut out, self.width as u32)?;
        write_u32(&mut out, self.channels as u32)?;
        write_f32s(&mut out, &self.data)
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 9];
        read_exact_or_truncated(&mut input, &mut magic, "image header")?;
        if &magic != IMG_MAGIC {
            return Err(Error::BadMagic("float image".into()));
        }
        let height = read_u32(&mut input, "image height")? as usize;
        let width = read_u32(&mut input, "image width")? as usize;
        let channels = read_u32(&mut input, "image channels")? as usize;
        let data = read_f32s(&mut input, height * width * channels, "image data")?;
        Ok(FloatImage {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::quat::normalize_quaternion;
    use nalgebra::{Matrix3, Matrix4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(w: usize, h: usize, f: f64) -> CameraModel {
        let k = Matrix3::new(f, 0.0, w as f64 / 2.0, 0.0, f, h as f64 / 2.0, 0.0, 0.0, 1.0);
        CameraModel::new(k, Matrix4::identity(), w, h).unwrap()
    }

    fn random_gaussian<R: Rng>(rng: &mut R) -> GaussianPrimitive {
        GaussianPrimitive {
            mu: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(3.0..6.0)],
            rot: normalize_quaternion(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).unwrap(),
            scale: std::array::from_fn(|_| rng.gen_range(0.2..0.6)),
            opacity: rng.gen_range(0.2..0.8),
            feat: vec![],
            mask: 0.0,
        }
    }

    #[test]
    fn projection_examples() {
        let cam = axis_camera(8, 6, 10.0);
        let g = GaussianPrimitive::isotropic([0.0, 0.0, 5.0], 0.5, 0.5, vec![]);
        let p = project_gaussian(&g, &cam).unwrap();
        assert_eq!(p.center, [4.0, 3.0]);
        assert_eq!(p.depth, 5.0);
        let behind = GaussianPrimitive::isotropic([0.0, 0.0, -1.0], 0.5, 0.5, vec![]);
        assert!(project_gaussian(&behind, &cam).is_none());
    }

    #[test]
    fn projection_matches_numeric_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = CameraModel::look_at([0.5, -6.0, 1.0], [0.0, 0.0, 0.3], [0.0, 0.0, 1.0], 30.0, 16, 12).unwrap();
        for _ in 0..10 {
            let mut g = random_gaussian(&mut rng);
            g.mu[2] -= 4.0;
            let p = project_gaussian(&g, &cam).unwrap();
            let f = |x: Vector3<f64>| {
                let uv = cam.project_camera_point(&cam.world_to_camera(&x));
                Vector2::new(uv[0], uv[1])
            };
            let h = 1e-6;
            let mut jac = Matrix2x3::zeros();
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                let col = (f(g.mean() + e) - f(g.mean() - e)) / (2.0 * h);
                jac.set_column(a, &col);
            }
            let cov = jac * g.covariance() * jac.transpose() + Matrix2::identity() * COV_FLOOR;
            for r in 0..2 {
                for c in 0..2 {
                    assert!((cov[(r, c)] - p.cov2d[r][c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn compositing_examples() {
        let cam = axis_camera(5, 5, 10.0);
        let empty = render_maps(&[], &Array2::zeros((0, 2)), &cam, &RenderConfig::default()).unwrap();
        assert!(empty.payload.iter().chain(&empty.alpha).all(|&v| v == 0.0));

        // a single Gaussian centered on pixel (2, 2)
        let g = GaussianPrimitive::isotropic([0.0, 0.0, 4.0], 0.05, 0.6, vec![]);
        let maps = render_all(
            std::slice::from_ref(&g),
            &Array2::from_elem((1, 2), 1.5),
            None,
            &cam,
            &RenderConfig::default(),
        )
        .unwrap();
        let a = maps.alpha[2 * 5 + 2];
        assert!((a - 0.6).abs() < 1e-12);
        assert!((maps.semantic.pixel(2, 2)[0] - 0.6 * 1.5).abs() < 1e-12);
        assert!((maps.depth.normalized()[12] - 4.0).abs() < 1e-6);

        let near = GaussianPrimitive::isotropic([0.0, 0.0, 2.0], 0.01, 0.6, vec![]);
        let far = GaussianPrimitive::isotropic([0.0, 0.0, 4.0], 0.02, 0.6, vec![]);
        let payload = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        let maps = render_maps(&[far, near], &payload, &cam, &RenderConfig::default()).unwrap();
        // sorted: near (payload 1) then far (payload 0)
        assert!((maps.pixel(2, 2)[0] - 0.6).abs() < 1e-12);
        assert!((maps.alpha[12] - 0.84).abs() < 1e-12);
        assert!(render_maps(&[g], &Array2::zeros((2, 1)), &cam, &RenderConfig::default()).is_err());
    }

    #[test]
    fn float_image_round_trip() {
        let img = FloatImage::from_f64(2, 3, 2, &(0..12).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        let mut buf = Vec::new();
        img.write(&mut buf).unwrap();
        assert_eq!(FloatImage::read(&buf[..]).unwrap(), img);
        assert!(matches!(FloatImage::read(&buf[..20]), Err(Error::TruncatedFile(_))));
        buf[0] = b'X';
        assert!(matches!(FloatImage::read(&buf[..]), Err(Error::BadMagic(_))));
    }
}
