//! Decoupled Gaussian deformation.
//!
//! A shared trunk maps `[feat, gamma_p(mu), e_t]` to a hidden vector; a rigid
//! head predicts a position offset and nonrigid heads predict deltas for every
//! parameter. A time-independent rigidity mask blends the two branches.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{
    encode_position, encode_position_backward, encode_time, feature_net, hidden_input_batch, EncodingConfig,
    TimeProjector,
};
use crate::geom::gaussian::{GaussianGrad, GaussianPrimitive};
use crate::geom::quat::{normalize_quaternion, normalize_quaternion_backward};
use crate::nn::{join, sigmoid, Linear, Mlp, MlpCache, Params};
use crate::{Error, Result};

pub const OPACITY_CLAMP: f64 = 1e-6;

/// Per-component deltas: position (m), quaternion (additive), log-scale, logit-opacity.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianUpdate {
    pub d_mu: [f64; 3],
    pub d_rot: [f64; 4],
    pub d_scale: [f64; 3],
    pub d_opacity: f64,
}

impl GaussianUpdate {
    pub const WIDTH: usize = 11;

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 11] {
        let mut a = [0.0; 11];
        a[0..3].copy_from_slice(&self.d_mu);
        a[3..7].copy_from_slice(&self.d_rot);
        a[7..10].copy_from_slice(&self.d_scale);
        a[10] = self.d_opacity;
        a
    }

    pub fn from_slice(a: &[f64]) -> Self {
        GaussianUpdate {
            d_mu: [a[0], a[1], a[2]],
            d_rot: [a[3], a[4], a[5], a[6]],
            d_scale: [a[7], a[8], a[9]],
            d_opacity: a[10],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn squared_norms(&self) -> [f64; 4] {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        [sq(&self.d_mu), sq(&self.d_rot), sq(&self.d_scale), self.d_opacity * self.d_opacity]
    }
}

/// Which nonrigid heads are active. A disabled mask head fixes `m = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadToggles {
    pub rotation: bool,
    pub scale: bool,
    pub opacity: bool,
    pub mask: bool,
}

impl Default for HeadToggles {
    fn default() -> Self {
        HeadToggles {
            rotation: true,
            scale: true,
            opacity: true,
            mask: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationConfig {
    /// Off: every frame uses the canonical Gaussians.
    pub enabled: bool,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: HeadToggles,
    /// Gaussians with mask below this take the rigid branch only.
    pub rigid_gate: f64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        DeformationConfig {
            enabled: true,
            hidden_dim: 256,
            depth: 6,
            heads: HeadToggles::default(),
            rigid_gate: 0.1,
        }
    }
}

impl DeformationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.depth == 0 {
            return Err(Error::Invalid("deformation hidden_dim and depth must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rigid_gate) {
            return Err(Error::Invalid("rigid_gate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationLossWeights {
    pub lambda_mu: f64,
    pub lambda_rot: f64,
    pub lambda_scale: f64,
    pub lambda_opacity: f64,
    pub lambda_reg: f64,
    pub lambda_mask: f64,
}

impl Default for DeformationLossWeights {
    fn default() -> Self {
        DeformationLossWeights {
            lambda_mu: 1.0,
            lambda_rot: 1.0,
            lambda_scale: 1.0,
            lambda_opacity: 1.0,
            lambda_reg: 1e-3,
            lambda_mask: 1e-2,
        }
    }
}

impl DeformationLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_mu,
            self.lambda_rot,
            self.lambda_scale,
            self.lambda_opacity,
            self.lambda_reg,
            self.lambda_mask,
        ];
        if all.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid("deformation loss weights must be >= 0".into()));
        }
        Ok(())
    }

    fn per_param(&self) -> [f64; 4] {
        [self.lambda_mu, self.lambda_rot, self.lambda_scale, self.lambda_opacity]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationNetwork {
    pub encoding: EncodingConfig,
    pub config: DeformationConfig,
    pub featurenet: Mlp,
    pub time_projector: TimeProjector,
    pub head_rigid_mu: Linear,
    pub head_def_mu: Linear,
    pub head_def_rot: Linear,
    pub head_def_scale: Linear,
    pub head_def_opacity: Linear,
    pub head_mask: Linear,
}

impl DeformationNetwork {
    /// Trunk and projector uniform, every head zero so the initial update is zero.
    pub fn new<R: Rng>(encoding: EncodingConfig, config: DeformationConfig, feat_dim: usize, rng: &mut R) -> Self {
        let p = encoding.position_dim();
        let d_h = config.hidden_dim;
        let featurenet = feature_net(feat_dim + p + encoding.c_t, d_h, config.depth, rng);
        let time_projector = TimeProjector::uniform(&encoding, rng);
        DeformationNetwork {
            encoding,
            config,
            featurenet,
            time_projector,
            head_rigid_mu: Linear::zeros(d_h, 3),
            head_def_mu: Linear::zeros(d_h, 3),
            head_def_rot: Linear::zeros(d_h, 4),
            head_def_scale: Linear::zeros(d_h, 3),
            head_def_opacity: Linear::zeros(d_h, 1),
            head_mask: Linear::zeros(feat_dim + p, 1),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.head_mask.in_dim() - self.encoding.position_dim()
    }

    /// Nonrigid delta after the rigid gate: zero when `m` is below the gate.
    pub fn gate_nonrigid(&self, m: f64, def: GaussianUpdate) -> GaussianUpdate {
        if m < self.config.rigid_gate {
            GaussianUpdate::zero()
        } else {
            def
        }
    }

    /// Rigidity mask for every Gaussian (all ones when the mask head is off).
    pub fn masks(&self, gaussians: &[GaussianPrimitive]) -> Result<Vec<f64>> {
        gaussians
            .iter()
            .map(|g| predict_rigidity_mask(&g.feat, &encode_position(g.mu, self.encoding.l_p), self))
            .collect()
    }

    /// Batched deformation of `canon` to every offset.
    pub fn forward(&self, canon: &[GaussianPrimitive], offsets: &[i32]) -> Result<DeformForward> {
        let n = canon.len();
        let c_g = self.feat_dim();
        let p = self.encoding.position_dim();
        let mut feat = Array2::zeros((n, c_g));
        let mut gp = Array2::zeros((n, p));
        for (i, g) in canon.iter().enumerate() {
            if g.feat.len() != c_g {
                return Err(Error::shape("gaussian feature width", c_g, g.feat.len()));
            }
            feat.row_mut(i).assign(&ndarray::ArrayView1::from(&g.feat[..]));
            gp.row_mut(i)
                .assign(&ndarray::Array1::from(encode_position(g.mu, self.encoding.l_p)));
        }
        let xm = ndarray::concatenate(Axis(1), &[feat.view(), gp.view()]).expect("same row count");
        let masks: Vec<f64> = if self.config.heads.mask {
            self.head_mask
                .forward_batch(xm.view())?
                .column(0)
                .iter()
                .map(|&z| sigmoid(z))
                .collect()
        } else {
            vec![1.0; n]
        };

        let mut per_offset = Vec::with_capacity(offsets.len());
        for &offset in offsets {
            let oc = if self.config.enabled {
                Some(self.forward_offset(offset, &feat, &gp)?)
            } else {
                None
            };
            let mut updates = Vec::with_capacity(n);
            let mut frame = Vec::with_capacity(n);
            for i in 0..n {
                let upd = match &oc {
                    Some(oc) => {
                        let mut rig = GaussianUpdate::zero();
                        rig.d_mu = [oc.rig[(i, 0)], oc.rig[(i, 1)], oc.rig[(i, 2)]];
                        let def = GaussianUpdate::from_slice(oc.def.row(i).as_slice().expect("contiguous"));
                        compose_update(masks[i], &rig, &self.gate_nonrigid(masks[i], def))
                    }
                    None => GaussianUpdate::zero(),
                };
                let mut g = apply_update(&canon[i], &upd)?;
                g.mask = masks[i];
                updates.push(upd);
                frame.push(g);
            }
            per_offset.push(OffsetForward {
                offset,
                cache: oc,
                updates,
                frame,
            });
        }
        Ok(DeformForward {
            feat,
            gp,
            xm,
            masks,
            offsets: per_offset,
        })
    }

    fn forward_offset(&self, offset: i32, feat: &Array2<f64>, gp: &Array2<f64>) -> Result<OffsetCache> {
        let n = feat.nrows();
        let gamma_t = encode_time(offset as f64, self.encoding.l_t);
        let (proj_hidden, e_t) = self.time_projector.forward(&gamma_t)?;
        let x = hidden_input_batch(feat, gp, &e_t);
        let trunk = self.featurenet.forward_batch(x)?;
        let h = trunk.output.view();
        let rig = self.head_rigid_mu.forward_batch(h)?;
        let mut def = Array2::zeros((n, GaussianUpdate::WIDTH));
        def.slice_mut(s![.., 0..3]).assign(&self.head_def_mu.forward_batch(h)?);
        let t = &self.config.heads;
        if t.rotation {
            def.slice_mut(s![.., 3..7]).assign(&self.head_def_rot.forward_batch(h)?);
        }
        if t.scale {
            def.slice_mut(s![.., 7..10]).assign(&self.head_def_scale.forward_batch(h)?);
        }
        if t.opacity {
            def.slice_mut(s![.., 10..11]).assign(&self.head_def_opacity.forward_batch(h)?);
        }
        Ok(OffsetCache {
            gamma_t,
            proj_hidden,
            e_t,
            trunk,
            rig,
            def,
        })
    }

    /// Pulls gradients on the deformed frames (and extra gradients on the raw
    /// updates and masks, e.g. from the deformation loss) back to the network
    /// and to the canonical Gaussians.
    pub fn backward(
        &self,
        canon: &[GaussianPrimitive],
        fwd: &DeformForward,
        d_frames: &[Vec<GaussianGrad>],
        d_updates_extra: Option<&[Vec<GaussianUpdate>]>,
        d_masks_extra: Option<&[f64]>,
        grad: &mut DeformationNetwork,
    ) -> Vec<GaussianGrad> {
        let n = canon.len();
        let c_g = self.feat_dim();
        let p = self.encoding.position_dim();
        let mut d_canon: Vec<GaussianGrad> = (0..n).map(|_| GaussianGrad::zeros(c_g)).collect();
        let mut d_feat = Array2::<f64>::zeros((n, c_g));
        let mut d_gp = Array2::<f64>::zeros((n, p));
        let mut d_mask = vec![0.0; n];
        if let Some(extra) = d_masks_extra {
            d_mask.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }

        for (k, of) in fwd.offsets.iter().enumerate() {
            let mut d_upd = Array2::<f64>::zeros((n, GaussianUpdate::WIDTH));
            for i in 0..n {
                let (dg, du) = apply_update_backward(&canon[i], &of.updates[i], &of.frame[i], &d_frames[k][i]);
                d_canon[i].add_assign(&dg);
                let mut du = du.to_array();
                if let Some(extra) = d_updates_extra {
                    let e = extra[k][i].to_array();
                    du.iter_mut().zip(e).for_each(|(a, b)| *a += b);
                }
                d_upd.row_mut(i).assign(&ndarray::ArrayView1::from(&du[..]));
            }
            let Some(oc) = &of.cache else { continue };

            let mut d_rig = Array2::<f64>::zeros((n, 3));
            let mut d_def = Array2::<f64>::zeros((n, GaussianUpdate::WIDTH));
            for i in 0..n {
                let m = fwd.masks[i];
                for a in 0..3 {
                    d_rig[(i, a)] = (1.0 - m) * d_upd[(i, a)];
                    d_mask[i] -= oc.rig[(i, a)] * d_upd[(i, a)];
                }
                if m >= self.config.rigid_gate {
                    for c in 0..GaussianUpdate::WIDTH {
                        d_def[(i, c)] = m * d_upd[(i, c)];
                        d_mask[i] += oc.def[(i, c)] * d_upd[(i, c)];
                    }
                }
            }
            let h = oc.trunk.output.view();
            let mut d_h = self
                .head_rigid_mu
                .backward_batch(h, d_rig.view(), &mut grad.head_rigid_mu);
            d_h += &self
                .head_def_mu
                .backward_batch(h, d_def.slice(s![.., 0..3]), &mut grad.head_def_mu);
            let t = &self.config.heads;
            if t.rotation {
                d_h += &self
                    .head_def_rot
                    .backward_batch(h, d_def.slice(s![.., 3..7]), &mut grad.head_def_rot);
            }
            if t.scale {
                d_h += &self
                    .head_def_scale
                    .backward_batch(h, d_def.slice(s![.., 7..10]), &mut grad.head_def_scale);
            }
            if t.opacity {
                d_h += &self
                    .head_def_opacity
                    .backward_batch(h, d_def.slice(s![.., 10..11]), &mut grad.head_def_opacity);
            }
            let d_x = self.featurenet.backward_batch(&oc.trunk, d_h, &mut grad.featurenet);
            d_feat += &d_x.slice(s![.., 0..c_g]);
            d_gp += &d_x.slice(s![.., c_g..c_g + p]);
            let d_e = d_x.slice(s![.., c_g + p..]).sum_axis(Axis(0));
            self.time_projector.backward(
                &oc.gamma_t,
                &oc.proj_hidden,
                d_e.as_slice().expect("contiguous"),
                &mut grad.time_projector,
            );
        }

        if self.config.heads.mask {
            let d_logit = Array2::from_shape_fn((n, 1), |(i, _)| {
                let m = fwd.masks[i];
                d_mask[i] * m * (1.0 - m)
            });
            let d_xm = self
                .head_mask
                .backward_batch(fwd.xm.view(), d_logit.view(), &mut grad.head_mask);
            d_feat += &d_xm.slice(s![.., 0..c_g]);
            d_gp += &d_xm.slice(s![.., c_g..]);
        }

        for i in 0..n {
            for c in 0..c_g {
                d_canon[i].feat[c] += d_feat[(i, c)];
            }
            let dmu = encode_position_backward(
                canon[i].mu,
                self.encoding.l_p,
                d_gp.row(i).as_slice().expect("contiguous"),
            );
            for a in 0..3 {
                d_canon[i].mu[a] += dmu[a];
            }
        }
        d_canon
    }
}

impl Params for DeformationNetwork {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.featurenet.visit(&join(prefix, "featurenet"), f);
        self.time_projector.visit(&join(prefix, "time_projector"), f);
        self.head_rigid_mu.visit(&join(prefix, "head_rigid_mu"), f);
        self.head_def_mu.visit(&join(prefix, "head_def_mu"), f);
        self.head_def_rot.visit(&join(prefix, "head_def_rot"), f);
        self.head_def_scale.visit(&join(prefix, "head_def_scale"), f);
        self.head_def_opacity.visit(&join(prefix, "head_def_opacity"), f);
        self.head_mask.visit(&join(prefix, "head_mask"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.featurenet.visit_mut(&join(prefix, "featurenet"), f);
        self.time_projector.visit_mut(&join(prefix, "time_projector"), f);
        self.head_rigid_mu.visit_mut(&join(prefix, "head_rigid_mu"), f);
        self.head_def_mu.visit_mut(&join(prefix, "head_def_mu"), f);
        self.head_def_rot.visit_mut(&join(prefix, "head_def_rot"), f);
        self.head_def_scale.visit_mut(&join(prefix, "head_def_scale"), f);
        self.head_def_opacity.visit_mut(&join(prefix, "head_def_opacity"), f);
        self.head_mask.visit_mut(&join(prefix, "head_mask"), f);
    }
}

#[derive(Clone, Debug)]
pub struct OffsetCache {
    gamma_t: Vec<f64>,
    proj_hidden: Vec<f64>,
    e_t: Vec<f64>,
    trunk: MlpCache,
    rig: Array2<f64>,
    def: Array2<f64>,
}

impl OffsetCache {
    pub fn time_embedding(&self) -> &[f64] {
        &self.e_t
    }
}

#[derive(Clone, Debug)]
pub struct OffsetForward {
    pub offset: i32,
    pub cache: Option<OffsetCache>,
    /// Composed update per Gaussian.
    pub updates: Vec<GaussianUpdate>,
    /// Deformed Gaussians, carrying the rigidity mask.
    pub frame: Vec<GaussianPrimitive>,
}

#[derive(Clone, Debug)]
pub struct DeformForward {
    feat: Array2<f64>,
    gp: Array2<f64>,
    xm: Array2<f64>,
    pub masks: Vec<f64>,
    pub offsets: Vec<OffsetForward>,
}

impl DeformForward {
    pub fn updates(&self) -> Vec<Vec<GaussianUpdate>> {
        self.offsets.iter().map(|o| o.updates.clone()).collect()
    }

    pub fn frame(&self, offset: i32) -> Option<&[GaussianPrimitive]> {
        self.offsets
            .iter()
            .find(|o| o.offset == offset)
            .map(|o| &o.frame[..])
    }

    pub fn num_gaussians(&self) -> usize {
        self.feat.nrows().max(self.gp.nrows())
    }
}

/// `m = sigmoid(head_mask([feat, gamma_p]))`; 1 when the mask head is disabled.
pub fn predict_rigidity_mask(feat: &[f64], gamma_p: &[f64], net: &DeformationNetwork) -> Result<f64> {
    let mut x = feat.to_vec();
    x.extend_from_slice(gamma_p);
    let z = net.head_mask.forward(&x)?;
    Ok(if net.config.heads.mask { sigmoid(z[0]) } else { 1.0 })
}

/// Rigid branch: position offset only.
pub fn predict_rigid_offset(h: &[f64], net: &DeformationNetwork) -> Result<GaussianUpdate> {
    let d = net.head_rigid_mu.forward(h)?;
    Ok(GaussianUpdate {
        d_mu: [d[0], d[1], d[2]],
        ..GaussianUpdate::zero()
    })
}

pub fn predict_nonrigid_delta(h: &[f64], net: &DeformationNetwork) -> Result<GaussianUpdate> {
    let d_mu = net.head_def_mu.forward(h)?;
    let t = &net.config.heads;
    let mut upd = GaussianUpdate {
        d_mu: [d_mu[0], d_mu[1], d_mu[2]],
        ..GaussianUpdate::zero()
    };
    if t.rotation {
        let r = net.head_def_rot.forward(h)?;
        upd.d_rot = [r[0], r[1], r[2], r[3]];
    }
    if t.scale {
        let s = net.head_def_scale.forward(h)?;
        upd.d_scale = [s[0], s[1], s[2]];
    }
    if t.opacity {
        upd.d_opacity = net.head_def_opacity.forward(h)?[0];
    }
    Ok(upd)
}

/// `(1 - m) rig + m def`, componentwise.
pub fn compose_update(m: f64, rig: &GaussianUpdate, def: &GaussianUpdate) -> GaussianUpdate {
    let (a, b) = (rig.to_array(), def.to_array());
    let mut out = [0.0; 11];
    for k in 0..11 {
        out[k] = (1.0 - m) * a[k] + m * b[k];
    }
    GaussianUpdate::from_slice(&out)
}

pub fn apply_update(g: &GaussianPrimitive, upd: &GaussianUpdate) -> Result<GaussianPrimitive> {
    let mut rot = g.rot;
    for k in 0..4 {
        rot[k] += upd.d_rot[k];
    }
    let o = g.opacity.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    Ok(GaussianPrimitive {
        mu: std::array::from_fn(|k| g.mu[k] + upd.d_mu[k]),
        rot: normalize_quaternion(rot)?,
        scale: std::array::from_fn(|k| (g.scale[k].ln() + upd.d_scale[k]).exp()),
        opacity: sigmoid((o / (1.0 - o)).ln() + upd.d_opacity),
        feat: g.feat.clone(),
        mask: g.mask,
    })
}

/// Returns gradients w.r.t. the input Gaussian and the update.
pub fn apply_update_backward(
    g: &GaussianPrimitive,
    upd: &GaussianUpdate,
    out: &GaussianPrimitive,
    d_out: &GaussianGrad,
) -> (GaussianGrad, GaussianUpdate) {
    let mut dg = GaussianGrad::zeros(d_out.feat.len());
    let mut du = GaussianUpdate::zero();
    dg.mu = d_out.mu;
    du.d_mu = d_out.mu;
    let mut rot = g.rot;
    for k in 0..4 {
        rot[k] += upd.d_rot[k];
    }
    let dr = normalize_quaternion_backward(&rot, &d_out.rot);
    dg.rot = dr;
    du.d_rot = dr;
    for k in 0..3 {
        du.d_scale[k] = d_out.scale[k] * out.scale[k];
        dg.scale[k] = du.d_scale[k] / g.scale[k];
    }
    let s = out.opacity;
    du.d_opacity = d_out.opacity * s * (1.0 - s);
    let o = g.opacity;
    if o > OPACITY_CLAMP && o < 1.0 - OPACITY_CLAMP {
        dg.opacity = du.d_opacity / (o * (1.0 - o));
    }
    dg.feat.copy_from_slice(&d_out.feat);
    (dg, du)
}

/// Deformed Gaussian sets keyed by frame offset.
pub fn deform_set(
    gaussians: &[GaussianPrimitive],
    frame_offsets: &[i32],
    net: &DeformationNetwork,
) -> Result<BTreeMap<i32, Vec<GaussianPrimitive>>> {
    let fwd = net.forward(gaussians, frame_offsets)?;
    Ok(fwd.offsets.into_iter().map(|o| (o.offset, o.frame)).collect())
}

/// `lambda_reg * mean_{i,t} sum_p lambda_p |dp|^2 + lambda_mask * mean_i m(1-m)`.
pub fn deformation_loss(updates: &[Vec<GaussianUpdate>], masks: &[f64], weights: &DeformationLossWeights) -> f64 {
    let lp = weights.per_param();
    let count: usize = updates.iter().map(|u| u.len()).sum();
    let reg = if count == 0 {
        0.0
    } else {
        updates
            .iter()
            .flatten()
            .map(|u| u.squared_norms().iter().zip(&lp).map(|(s, l)| s * l).sum::<f64>())
            .sum::<f64>()
            / count as f64
    };
    let mask = if masks.is_empty() {
        0.0
    } else {
        masks.iter().map(|m| m * (1.0 - m)).sum::<f64>() / masks.len() as f64
    };
    weights.lambda_reg * reg + weights.lambda_mask * mask
}

/// Gradients of [`deformation_loss`] w.r.t. each update and mask.
pub fn deformation_loss_backward(
    updates: &[Vec<GaussianUpdate>],
    masks: &[f64],
    weights: &DeformationLossWeights,
) -> (Vec<Vec<GaussianUpdate>>, Vec<f64>) {
    let lp = weights.per_param();
    let count: usize = updates.iter().map(|u| u.len()).sum();
    let c = if count == 0 {
        0.0
    } else {
        2.0 * weights.lambda_reg / count as f64
    };
    let d_upd = updates
        .iter()
        .map(|row| {
            row.iter()
                .map(|u| GaussianUpdate {
                    d_mu: u.d_mu.map(|v| c * lp[0] * v),
                    d_rot: u.d_rot.map(|v| c * lp[1] * v),
                    d_scale: u.d_scale.map(|v| c * lp[2] * v),
                    d_opacity: c * lp[3] * u.d_opacity,
                })
                .collect()
        })
        .collect();
    let cm = if masks.is_empty() {
        0.0
    } else {
        weights.lambda_mask / masks.len() as f64
    };
    let d_mask = masks.iter().map(|m| cm * (1.0 - 2.0 * m)).collect();
    (d_upd, d_mask)
}
