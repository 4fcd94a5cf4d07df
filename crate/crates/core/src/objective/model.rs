use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{
    depth_terms, depth_terms_backward, segmentation_terms, segmentation_terms_backward, total_loss, LossComponents,
    LossWeights,
};
use super::TrainConfig;
use crate::deformation::{deformation_loss, deformation_loss_backward, DeformationNetwork, GaussianUpdate};
use crate::distillation::{
    distillation_loss, distillation_loss_backward, project_student, project_student_backward, project_teacher,
    project_teacher_backward, AlignmentProjectors, TeacherFeatureStack,
};
use crate::geom::quat::normalize_quaternion_backward;
use crate::geom::{normalize_quaternion, CameraModel, GaussianGrad, GaussianPrimitive, SemanticLabelGrid, VoxelGridSpec};
use crate::nn::{join, logit, sigmoid, zeros_like, Params};
use crate::rendering::{render_all, render_all_backward, AllMapsGrad, DEPTH_EPSILON, MIN_VALID_ALPHA};
use crate::splatting::{predict_labels, PredictionHeads};
use crate::synth::{PseudoLabels, SyntheticScene};
use crate::taxonomy::NUM_CLASSES;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_gaussians: usize,
    pub feat_dim: usize,
    /// Initial scale as a multiple of the voxel size.
    pub init_scale_mult: f64,
    pub init_opacity: f64,
    /// Initial features are uniform in `±init_feat_range`.
    pub init_feat_range: f64,
    pub aligned_dim: usize,
    /// Teacher channel count used when no teacher is attached.
    pub teacher_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_gaussians: 512,
            feat_dim: crate::geom::DEFAULT_FEAT_DIM,
            init_scale_mult: 1.0,
            init_opacity: 0.1,
            init_feat_range: 0.01,
            aligned_dim: crate::distillation::DEFAULT_ALIGNED_DIM,
            teacher_channels: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.aligned_dim == 0 || self.teacher_channels == 0 {
            return Err(Error::Invalid("feature widths must be >= 1".into()));
        }
        if !(self.init_scale_mult > 0.0) || !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::Invalid("initial scale must be > 0 and opacity in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Directly optimized canonical Gaussians in unconstrained form:
/// unnormalized rotation, log scale and opacity logit.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalGaussians {
    pub mu: Array2<f64>,
    pub rot: Array2<f64>,
    pub log_scale: Array2<f64>,
    pub opacity_logit: Array1<f64>,
    pub feat: Array2<f64>,
}

impl CanonicalGaussians {
    /// Uniform positions in the grid, identity rotations.
    pub fn init<R: Rng>(cfg: &ModelConfig, spec: &VoxelGridSpec, rng: &mut R) -> Self {
        let n = cfg.num_gaussians;
        let mu = Array2::from_shape_fn((n, 3), |(_, k)| rng.gen_range(spec.min_corner[k]..spec.max_corner[k]));
        let rot = Array2::from_shape_fn((n, 4), |(_, k)| if k == 0 { 1.0 } else { 0.0 });
        let log_scale = Array2::from_elem((n, 3), (spec.voxel_size * cfg.init_scale_mult).ln());
        let opacity_logit = Array1::from_elem(n, logit(cfg.init_opacity));
        let r = cfg.init_feat_range;
        let feat = Array2::from_shape_fn((n, cfg.feat_dim), |_| if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 });
        CanonicalGaussians {
            mu,
            rot,
            log_scale,
            opacity_logit,
            feat,
        }
    }

    pub fn from_primitives(gs: &[GaussianPrimitive], feat_dim: usize) -> Result<Self> {
        let n = gs.len();
        let mut c = CanonicalGaussians {
            mu: Array2::zeros((n, 3)),
            rot: Array2::zeros((n, 4)),
            log_scale: Array2::zeros((n, 3)),
            opacity_logit: Array1::zeros(n),
            feat: Array2::zeros((n, feat_dim)),
        };
        for (i, g) in gs.iter().enumerate() {
            if g.feat.len() != feat_dim {
                return Err(Error::shape("gaussian feature width", feat_dim, g.feat.len()));
            }
            for k in 0..3 {
                c.mu[(i, k)] = g.mu[k];
                c.log_scale[(i, k)] = g.scale[k].ln();
            }
            for k in 0..4 {
                c.rot[(i, k)] = g.rot[k];
            }
            c.opacity_logit[i] = logit(g.opacity);
            for k in 0..feat_dim {
                c.feat[(i, k)] = g.feat[k];
            }
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.feat.ncols()
    }

    fn raw_rot(&self, i: usize) -> [f64; 4] {
        std::array::from_fn(|k| self.rot[(i, k)])
    }

    pub fn primitives(&self) -> Result<Vec<GaussianPrimitive>> {
        (0..self.len())
            .map(|i| {
                Ok(GaussianPrimitive {
                    mu: std::array::from_fn(|k| self.mu[(i, k)]),
                    rot: normalize_quaternion(self.raw_rot(i))?,
                    scale: std::array::from_fn(|k| self.log_scale[(i, k)].exp()),
                    opacity: sigmoid(self.opacity_logit[i]),
                    feat: self.feat.row(i).to_vec(),
                    mask: 1.0,
                })
            })
            .collect()
    }

    /// Maps gradients on [`Self::primitives`] to the raw parameters.
    pub fn backward(&self, prims: &[GaussianPrimitive], d: &[GaussianGrad], grad: &mut CanonicalGaussians) {
        for i in 0..self.len() {
            let g = &d[i];
            for k in 0..3 {
                grad.mu[(i, k)] += g.mu[k];
                grad.log_scale[(i, k)] += g.scale[k] * prims[i].scale[k];
            }
            let dr = normalize_quaternion_backward(&self.raw_rot(i), &g.rot);
            for k in 0..4 {
                grad.rot[(i, k)] += dr[k];
            }
            let o = prims[i].opacity;
            grad.opacity_logit[i] += g.opacity * o * (1.0 - o);
            for (k, v) in g.feat.iter().enumerate() {
                grad.feat[(i, k)] += v;
            }
        }
    }
}

impl Params for CanonicalGaussians {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let slice = |a: &Array2<f64>| a.as_slice().expect("standard layout").to_vec();
        f(&join(prefix, "mu"), self.mu.shape(), &slice(&self.mu));
        f(&join(prefix, "rot"), self.rot.shape(), &slice(&self.rot));
        f(&join(prefix, "log_scale"), self.log_scale.shape(), &slice(&self.log_scale));
        f(
            &join(prefix, "opacity_logit"),
            self.opacity_logit.shape(),
            self.opacity_logit.as_slice().expect("standard layout"),
        );
        f(&join(prefix, "feat"), self.feat.shape(), &slice(&self.feat));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "mu"), self.mu.as_slice_mut().expect("standard layout"));
        f(&join(prefix, "rot"), self.rot.as_slice_mut().expect("standard layout"));
        f(&join(prefix, "log_scale"), self.log_scale.as_slice_mut().expect("standard layout"));
        f(
            &join(prefix, "opacity_logit"),
            self.opacity_logit.as_slice_mut().expect("standard layout"),
        );
        f(&join(prefix, "feat"), self.feat.as_slice_mut().expect("standard layout"));
    }
}

/// Every trainable parameter of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub gaussians: CanonicalGaussians,
    pub deformation: DeformationNetwork,
    pub heads: PredictionHeads,
    pub projectors: AlignmentProjectors,
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.gaussians.visit(&join(prefix, "gaussians"), f);
        self.deformation.visit(&join(prefix, "deformation"), f);
        self.heads.visit(&join(prefix, "heads"), f);
        self.projectors.visit(&join(prefix, "projectors"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.gaussians.visit_mut(&join(prefix, "gaussians"), f);
        self.deformation.visit_mut(&join(prefix, "deformation"), f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
        self.projectors.visit_mut(&join(prefix, "projectors"), f);
    }
}

/// Per-offset supervision: one label set per camera.
pub struct FrameSupervision<'a> {
    pub offset: i32,
    pub labels: &'a [PseudoLabels],
}

/// Everything a loss evaluation reads besides the model.
pub struct Supervision<'a> {
    pub cameras: &'a [CameraModel],
    pub frames: Vec<FrameSupervision<'a>>,
    /// Teacher features at offset 0; distillation is skipped without them.
    pub teacher: Option<&'a TeacherFeatureStack>,
}

impl<'a> Supervision<'a> {
    pub fn from_scene(scene: &'a SyntheticScene, offsets: &[i32], teacher: Option<&'a TeacherFeatureStack>) -> Result<Self> {
        let frames = offsets
            .iter()
            .map(|&offset| {
                Ok(FrameSupervision {
                    offset,
                    labels: scene.labels_at(offset)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Supervision {
            cameras: &scene.cameras,
            frames,
            teacher,
        })
    }

    fn check(&self) -> Result<()> {
        for f in &self.frames {
            if f.labels.len() != self.cameras.len() {
                return Err(Error::shape("pseudo label views", self.cameras.len(), f.labels.len()));
            }
            for (l, c) in f.labels.iter().zip(self.cameras) {
                if l.depth.len() != c.num_pixels() || l.seg.len() != c.num_pixels() {
                    return Err(Error::shape("pseudo label map", c.num_pixels(), l.depth.len()));
                }
            }
        }
        if let Some(t) = self.teacher {
            if t.num_views() != self.cameras.len() {
                return Err(Error::shape("teacher views", self.cameras.len(), t.num_views()));
            }
        }
        Ok(())
    }
}

struct Job {
    frame: usize,
    camera: usize,
    distill: bool,
}

struct JobForward {
    sem: Vec<f64>,
    depth_raw: Vec<f64>,
    features: Option<Vec<f64>>,
    alpha: Vec<f64>,
    seg: (f64, usize),
    dep: (f64, usize),
}

struct JobBackward {
    frame_grads: Vec<GaussianGrad>,
    d_sem: Array2<f64>,
    d_student: Option<Array2<f64>>,
}

/// Loss components, their weighted total and pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub components: LossComponents,
    pub total: f64,
    pub seg_pixels: usize,
    pub depth_pixels: usize,
    pub distill_pixels: usize,
}

fn as_valid(alpha: &[f64]) -> Vec<bool> {
    alpha.iter().map(|&a| a >= MIN_VALID_ALPHA).collect()
}

fn normalized_depth(raw: &[f64], alpha: &[f64]) -> Vec<f64> {
    raw.iter().zip(alpha).map(|(p, a)| p / (a + DEPTH_EPSILON)).collect()
}

impl Model {
    pub fn new(cfg: &TrainConfig, spec: &VoxelGridSpec, teacher_channels: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m = &cfg.model;
        let gaussians = CanonicalGaussians::init(m, spec, &mut rng);
        let deformation = DeformationNetwork::new(cfg.encoding, cfg.deformation, m.feat_dim, &mut rng);
        let heads = PredictionHeads::new(m.feat_dim, NUM_CLASSES, &mut rng);
        let projectors = AlignmentProjectors::new(
            teacher_channels.unwrap_or(m.teacher_channels),
            m.feat_dim,
            m.aligned_dim,
            &mut rng,
        )?;
        Ok(Model {
            gaussians,
            deformation,
            heads,
            projectors,
        })
    }

    /// Per-Gaussian class logits, one row per Gaussian.
    pub fn semantic_payloads(&self, prims: &[GaussianPrimitive]) -> Result<Array2<f64>> {
        let c = self.heads.num_classes();
        let mut out = Array2::zeros((prims.len(), c));
        for (i, g) in prims.iter().enumerate() {
            let l = self.heads.gaussian_logits(&g.feat)?;
            out.row_mut(i).iter_mut().zip(l).for_each(|(a, b)| *a = b);
        }
        Ok(out)
    }

    /// Labels predicted for `offset`: deform, splat, apply heads, threshold.
    pub fn predict(&self, offset: i32, spec: &VoxelGridSpec, cfg: &TrainConfig) -> Result<SemanticLabelGrid> {
        let frame = self.deformed(offset)?;
        predict_labels(&frame, spec, &self.heads, &cfg.splat)
    }

    pub fn deformed(&self, offset: i32) -> Result<Vec<GaussianPrimitive>> {
        let prims = self.gaussians.primitives()?;
        let fwd = self.deformation.forward(&prims, &[offset])?;
        Ok(fwd.offsets.into_iter().next().expect("one offset").frame)
    }

    /// Total loss and, when `with_grad`, its gradient for every parameter.
    pub fn loss_and_grad(
        &self,
        sup: &Supervision<'_>,
        cfg: &TrainConfig,
        with_grad: bool,
    ) -> Result<(LossReport, Option<Model>)> {
        sup.check()?;
        let w: &LossWeights = &cfg.loss;
        let prims = self.gaussians.primitives()?;
        let offsets: Vec<i32> = sup.frames.iter().map(|f| f.offset).collect();
        let fwd = self.deformation.forward(&prims, &offsets)?;
        let sem_payload = self.semantic_payloads(&prims)?;
        let teacher_maps = match sup.teacher {
            Some(stack) if offsets.contains(&0) => {
                let cam = &sup.cameras[0];
                Some(project_teacher(stack, &self.projectors, cam.height, cam.width)?)
            }
            _ => None,
        };

        let jobs: Vec<Job> = sup
            .frames
            .iter()
            .enumerate()
            .flat_map(|(k, f)| {
                let distill = f.offset == 0 && teacher_maps.is_some();
                (0..sup.cameras.len()).map(move |v| Job {
                    frame: k,
                    camera: v,
                    distill,
                })
            })
            .collect();
        let student_payloads: Vec<Option<Array2<f64>>> = fwd
            .offsets
            .iter()
            .map(|of| {
                if of.offset == 0 && teacher_maps.is_some() {
                    project_student(&of.frame, &self.projectors).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;

        let classes = self.heads.num_classes();
        let forward: Vec<JobForward> = jobs
            .par_iter()
            .map(|job| {
                let frame = &fwd.offsets[job.frame].frame;
                let cam = &sup.cameras[job.camera];
                let labels = &sup.frames[job.frame].labels[job.camera];
                let feats = student_payloads[job.frame].as_ref().filter(|_| job.distill);
                let maps = render_all(frame, &sem_payload, feats, cam, &cfg.render)?;
                let valid = as_valid(&maps.alpha);
                let depth = normalized_depth(&maps.depth.payload, &maps.alpha);
                Ok(JobForward {
                    seg: segmentation_terms(&maps.semantic.payload, classes, &labels.seg)?,
                    dep: depth_terms(&depth, &valid, &labels.depth)?,
                    sem: maps.semantic.payload,
                    depth_raw: maps.depth.payload,
                    features: maps.features.map(|f| f.payload),
                    alpha: maps.alpha,
                })
            })
            .collect::<Result<_>>()?;

        let seg_count: usize = forward.iter().map(|f| f.seg.1).sum();
        let dep_count: usize = forward.iter().map(|f| f.dep.1).sum();
        let mut comps = LossComponents::default();
        if seg_count > 0 {
            comps.seg = forward.iter().map(|f| f.seg.0).sum::<f64>() / seg_count as f64;
        }
        if dep_count > 0 {
            comps.dep = forward.iter().map(|f| f.dep.0).sum::<f64>() / dep_count as f64;
        }

        let aligned = self.projectors.aligned_dim();
        let student_maps: Vec<Array2<f64>> = jobs
            .iter()
            .zip(&forward)
            .filter(|(j, _)| j.distill)
            .map(|(_, f)| {
                let data = f.features.clone().expect("distillation job renders features");
                Array2::from_shape_vec((data.len() / aligned, aligned), data).expect("pixel-major features")
            })
            .collect();
        let distill_valid: Vec<Vec<bool>> = jobs
            .iter()
            .zip(&forward)
            .filter(|(j, _)| j.distill)
            .map(|(_, f)| as_valid(&f.alpha))
            .collect();
        let mut distill_pixels = 0;
        if let Some(t) = &teacher_maps {
            let d = distillation_loss(t, &student_maps, &distill_valid)?;
            comps.distill = d.value;
            distill_pixels = d.counted;
        }

        let updates = fwd.updates();
        comps.def = deformation_loss(&updates, &fwd.masks, &cfg.deformation_loss);
        let total = total_loss(&comps, w)?;
        let report = LossReport {
            components: comps,
            total,
            seg_pixels: seg_count,
            depth_pixels: dep_count,
            distill_pixels,
        };
        if !with_grad {
            return Ok((report, None));
        }

        let (d_teacher, d_student) = match &teacher_maps {
            Some(t) => {
                let (dt, ds) = distillation_loss_backward(t, &student_maps, &distill_valid, w.lambda_distill)?;
                (Some(dt), Some(ds))
            }
            None => (None, None),
        };

        let seg_scale = if seg_count > 0 { w.lambda_seg / seg_count as f64 } else { 0.0 };
        let dep_scale = if dep_count > 0 { w.lambda_dep / dep_count as f64 } else { 0.0 };
        let mut distill_index = vec![None; jobs.len()];
        let mut next = 0;
        for (j, job) in jobs.iter().enumerate() {
            if job.distill {
                distill_index[j] = Some(next);
                next += 1;
            }
        }
        let backward: Vec<JobBackward> = jobs
            .par_iter()
            .zip(&forward)
            .enumerate()
            .map(|(j, (job, f))| {
                let frame = &fwd.offsets[job.frame].frame;
                let cam = &sup.cameras[job.camera];
                let labels = &sup.frames[job.frame].labels[job.camera];
                let npx = cam.num_pixels();
                let mut d_sem = vec![0.0; f.sem.len()];
                segmentation_terms_backward(&f.sem, classes, &labels.seg, seg_scale, &mut d_sem);
                let depth = normalized_depth(&f.depth_raw, &f.alpha);
                let valid = as_valid(&f.alpha);
                let mut d_depth = vec![0.0; npx];
                depth_terms_backward(&depth, &valid, &labels.depth, dep_scale, &mut d_depth);
                let mut d_raw = vec![0.0; npx];
                let mut d_alpha = vec![0.0; npx];
                for px in 0..npx {
                    let a = f.alpha[px] + DEPTH_EPSILON;
                    d_raw[px] = d_depth[px] / a;
                    d_alpha[px] = -d_depth[px] * f.depth_raw[px] / (a * a);
                }
                let d_feat = distill_index[j].map(|k| {
                    d_student.as_ref().expect("student gradient")[k]
                        .as_slice()
                        .expect("standard layout")
                        .to_vec()
                });
                let feats = student_payloads[job.frame].as_ref().filter(|_| job.distill);
                let grad = AllMapsGrad {
                    semantic: d_sem,
                    depth: d_raw,
                    features: d_feat,
                    alpha: d_alpha,
                };
                let (frame_grads, d_sem, d_student) =
                    render_all_backward(frame, &sem_payload, feats, cam, &cfg.render, &grad)?;
                Ok(JobBackward {
                    frame_grads,
                    d_sem,
                    d_student,
                })
            })
            .collect::<Result<_>>()?;

        let n = prims.len();
        let c_g = self.gaussians.feat_dim();
        let mut grad = zeros_like(self);
        let mut d_frames: Vec<Vec<GaussianGrad>> =
            (0..offsets.len()).map(|_| (0..n).map(|_| GaussianGrad::zeros(0)).collect()).collect();
        let mut d_sem_total = Array2::<f64>::zeros((n, classes));
        let mut d_student_total: Vec<Option<Array2<f64>>> = vec![None; offsets.len()];
        for (job, b) in jobs.iter().zip(backward) {
            for (acc, g) in d_frames[job.frame].iter_mut().zip(&b.frame_grads) {
                acc.add_assign(g);
            }
            d_sem_total += &b.d_sem;
            if let Some(ds) = b.d_student {
                match &mut d_student_total[job.frame] {
                    Some(acc) => *acc += &ds,
                    slot => *slot = Some(ds),
                }
            }
        }

        if let (Some(stack), Some(dt)) = (sup.teacher, &d_teacher) {
            let cam = &sup.cameras[0];
            project_teacher_backward(stack, &self.projectors, cam.height, cam.width, dt, &mut grad.projectors)?;
        }

        let mut d_feat = Array2::<f64>::zeros((n, c_g));
        for i in 0..n {
            let row: Vec<f64> = d_sem_total.row(i).to_vec();
            let df = self.heads.gaussian_logits_backward(&prims[i].feat, &row, &mut grad.heads);
            d_feat.row_mut(i).iter_mut().zip(df).for_each(|(a, b)| *a += b);
        }
        for (k, ds) in d_student_total.iter().enumerate() {
            if let Some(ds) = ds {
                d_feat += &project_student_backward(&fwd.offsets[k].frame, &self.projectors, ds, &mut grad.projectors)?;
            }
        }

        let (mut d_upd, mut d_mask) = deformation_loss_backward(&updates, &fwd.masks, &cfg.deformation_loss);
        let ld = w.lambda_def;
        for row in &mut d_upd {
            for u in row.iter_mut() {
                let a = u.to_array().map(|x| x * ld);
                *u = GaussianUpdate::from_slice(&a);
            }
        }
        d_mask.iter_mut().for_each(|m| *m *= ld);
        let mut d_canon = self.deformation.backward(
            &prims,
            &fwd,
            &d_frames,
            Some(&d_upd),
            Some(&d_mask),
            &mut grad.deformation,
        );
        for (i, g) in d_canon.iter_mut().enumerate() {
            if g.feat.len() != c_g {
                g.feat.resize(c_g, 0.0);
            }
            for k in 0..c_g {
                g.feat[k] += d_feat[(i, k)];
            }
        }
        self.gaussians.backward(&prims, &d_canon, &mut grad.gaussians);
        Ok((report, Some(grad)))
    }
}
