//! Teacher feature stacks, aligned projections of teacher and student
//! features, and the cosine alignment loss.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_bytes, read_f32s, read_u32, write_f32s, write_u32};
use crate::geom::{CameraModel, GaussianPrimitive};
use crate::nn::{join, Linear, Params};
use crate::synth::{pixel_hits, SyntheticScene};
use crate::taxonomy::NUM_CLASSES;
use crate::{Error, Result};

pub const TEACHER_MAGIC: &[u8; 8] = b"DEGO-TF1";
pub const TEACHER_VERSION: u32 = 1;
pub const DEFAULT_BLOCK_INDEX: u32 = 22;
pub const DEFAULT_ALIGNED_DIM: usize = 32;
/// Norm below which a pixel vector is excluded from the cosine loss.
pub const NORM_EPSILON: f64 = 1e-8;
/// Upper edges (meters) of the scene-flow bins used by the synthetic teacher.
pub const FLOW_BIN_EDGES: [f64; 3] = [0.5, 2.0, 8.0];

/// Patch-grid teacher features at the reference frame, one map per view.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatureStack {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub block_index: u32,
    /// Per view, row-major `height * width * channels`.
    pub views: Vec<Vec<f32>>,
}

impl TeacherFeatureStack {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn cell(&self, view: usize, row: usize, col: usize) -> &[f32] {
        let p = (row * self.width + col) * self.channels;
        &self.views[view][p..p + self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width * self.channels;
        for v in &self.views {
            if v.len() != n {
                return Err(Error::shape("teacher view", n, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue("teacher feature".into()));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(TEACHER_MAGIC)?;
        for v in [
            TEACHER_VERSION,
            self.views.len() as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.block_index,
        ] {
            write_u32(&mut out, v)?;
        }
        for v in &self.views {
            write_f32s(&mut out, v)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let magic = read_bytes(&mut input, TEACHER_MAGIC.len(), "teacher magic")?;
        if magic != TEACHER_MAGIC {
            return Err(Error::BadMagic(String::from_utf8_lossy(&magic).into_owned()));
        }
        let version = read_u32(&mut input, "teacher version")?;
        if version != TEACHER_VERSION {
            return Err(Error::Invalid(format!("unsupported teacher file version {version}")));
        }
        let views = read_u32(&mut input, "teacher header")? as usize;
        let height = read_u32(&mut input, "teacher header")? as usize;
        let width = read_u32(&mut input, "teacher header")? as usize;
        let channels = read_u32(&mut input, "teacher header")? as usize;
        let block_index = read_u32(&mut input, "teacher header")?;
        let n = height * width * channels;
        let views = (0..views)
            .map(|_| read_f32s(&mut input, n, "teacher features"))
            .collect::<Result<Vec<_>>>()?;
        let stack = TeacherFeatureStack {
            height,
            width,
            channels,
            block_index,
            views,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

pub fn load_teacher_features(path: &Path) -> Result<TeacherFeatureStack> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TeacherFeatureStack::read(&bytes[..])
}

/// Source of teacher features for a scene.
pub trait TeacherProvider {
    fn teacher_features(&self, scene: &SyntheticScene) -> Result<TeacherFeatureStack>;
}

/// Features dumped to a file beforehand.
#[derive(Clone, Debug)]
pub struct FileTeacher {
    pub path: PathBuf,
}

impl TeacherProvider for FileTeacher {
    fn teacher_features(&self, scene: &SyntheticScene) -> Result<TeacherFeatureStack> {
        let stack = load_teacher_features(&self.path)?;
        if stack.num_views() != scene.cameras.len() {
            return Err(Error::shape("teacher views", scene.cameras.len(), stack.num_views()));
        }
        Ok(stack)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTeacher {
    pub patch_size: usize,
    /// Width of each channel half.
    pub c_t: usize,
    pub seed: u64,
}

impl Default for SyntheticTeacher {
    fn default() -> Self {
        SyntheticTeacher {
            patch_size: 8,
            c_t: 64,
            seed: 0,
        }
    }
}

impl TeacherProvider for SyntheticTeacher {
    fn teacher_features(&self, scene: &SyntheticScene) -> Result<TeacherFeatureStack> {
        synth_teacher(scene, &scene.cameras, self.patch_size, self.c_t, self.seed)
    }
}

pub fn flow_bin(flow: f64) -> usize {
    FLOW_BIN_EDGES.iter().take_while(|&&e| flow >= e).count()
}

/// `count` unit vectors of length `dim`: orthonormal (Gram-Schmidt on random
/// draws) for the first `dim` of them, plain normalized random draws after.
pub fn embedding_table(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if i < dim {
                for u in &table {
                    let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(x, a)| *x -= d * a);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                table.push(v);
                break;
            }
        }
    }
    table
}

fn majority(counts: &[usize]) -> Option<usize> {
    let (best, &n) = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then_some(best)
}

/// Deterministic stand-in teacher. Each patch cell holds two unit embeddings:
/// one keyed by (majority ground-truth class, view) and one keyed by
/// (majority class, scene-flow bin of its objects). Patches without any
/// surface use an extra background class.
pub fn synth_teacher(
    scene: &SyntheticScene,
    cameras: &[CameraModel],
    patch_size: usize,
    c_t: usize,
    seed: u64,
) -> Result<TeacherFeatureStack> {
    if patch_size == 0 || c_t == 0 {
        return Err(Error::Invalid("patch size and teacher width must be positive".into()));
    }
    let k0 = scene
        .frame_index(0)
        .ok_or_else(|| Error::MissingGroundTruth("reference frame".into()))?;
    let grid = &scene.frames[k0];
    let ids = &scene.instances[k0];
    let flows = scene.recipe.object_flow();
    let Some(first) = cameras.first() else {
        return Err(Error::Invalid("no cameras".into()));
    };
    if cameras.iter().any(|c| c.width != first.width || c.height != first.height) {
        return Err(Error::Invalid("cameras must share the image size".into()));
    }
    let (h, w) = (first.height, first.width);
    let (hp, wp) = (h.div_ceil(patch_size), w.div_ceil(patch_size));
    let classes = NUM_CLASSES + 1;
    let bins = FLOW_BIN_EDGES.len() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table_a = embedding_table(classes * cameras.len(), c_t, &mut rng);
    let table_b = embedding_table(classes * bins, c_t, &mut rng);

    let mut views = Vec::with_capacity(cameras.len());
    for (v, cam) in cameras.iter().enumerate() {
        let hits = pixel_hits(grid, cam);
        let mut class_counts = vec![vec![0usize; classes]; hp * wp];
        let mut bin_counts = vec![vec![0usize; classes * bins]; hp * wp];
        for (px, hit) in hits.iter().enumerate() {
            let Some(hit) = hit else { continue };
            let cell = (px / w / patch_size) * wp + (px % w) / patch_size;
            let class = grid.get(hit.voxel) as usize;
            let obj = ids[grid.spec.linear_index(hit.voxel)];
            let flow = flows.get(obj as usize).copied().unwrap_or(0.0);
            class_counts[cell][class] += 1;
            bin_counts[cell][class * bins + flow_bin(flow)] += 1;
        }
        let mut data = Vec::with_capacity(hp * wp * 2 * c_t);
        for cell in 0..hp * wp {
            let class = majority(&class_counts[cell]).unwrap_or(NUM_CLASSES);
            let bin = majority(&bin_counts[cell][class * bins..(class + 1) * bins]).unwrap_or(0);
            data.extend(table_a[class * cameras.len() + v].iter().map(|&x| x as f32));
            data.extend(table_b[class * bins + bin].iter().map(|&x| x as f32));
        }
        views.push(data);
    }
    Ok(TeacherFeatureStack {
        height: hp,
        width: wp,
        channels: 2 * c_t,
        block_index: DEFAULT_BLOCK_INDEX,
        views,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentProjectors {
    pub teacher_proj: Linear,
    pub student_proj: Linear,
}

impl AlignmentProjectors {
    pub fn new<R: Rng>(teacher_channels: usize, feat_dim: usize, aligned: usize, rng: &mut R) -> Result<Self> {
        if aligned == 0 {
            return Err(Error::Invalid("aligned width must be at least 1".into()));
        }
        Ok(AlignmentProjectors {
            teacher_proj: Linear::uniform(teacher_channels, aligned, rng),
            student_proj: Linear::uniform(feat_dim, aligned, rng),
        })
    }

    pub fn aligned_dim(&self) -> usize {
        self.student_proj.out_dim()
    }
}

impl Params for AlignmentProjectors {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.teacher_proj.visit(&join(prefix, "teacher_proj"), f);
        self.student_proj.visit(&join(prefix, "student_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.teacher_proj.visit_mut(&join(prefix, "teacher_proj"), f);
        self.student_proj.visit_mut(&join(prefix, "student_proj"), f);
    }
}

/// Two-tap bilinear weights `(lo, hi, frac)` mapping `n_in` samples onto
/// `n_out`, half-pixel centered with edge clamping.
pub fn bilinear_taps(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn upsample(cells: &Array2<f64>, hp: usize, wp: usize, h: usize, w: usize) -> Array2<f64> {
    let c = cells.ncols();
    let ty = bilinear_taps(h, hp);
    let tx = bilinear_taps(w, wp);
    let mut out = Array2::zeros((h * w, c));
    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
            let taps = [
                (y0 * wp + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * wp + x1, (1.0 - fy) * fx),
                (y1 * wp + x0, fy * (1.0 - fx)),
                (y1 * wp + x1, fy * fx),
            ];
            let mut row = out.row_mut(i * w + j);
            for (cell, wgt) in taps {
                row.scaled_add(wgt, &cells.row(cell));
            }
        }
    }
    out
}

fn upsample_transpose(d_out: &Array2<f64>, hp: usize, wp: usize, h: usize, w: usize) -> Array2<f64> {
    let c = d_out.ncols();
    let ty = bilinear_taps(h, hp);
    let tx = bilinear_taps(w, wp);
    let mut cells = Array2::zeros((hp * wp, c));
    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
            let taps = [
                (y0 * wp + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * wp + x1, (1.0 - fy) * fx),
                (y1 * wp + x0, fy * (1.0 - fx)),
                (y1 * wp + x1, fy * fx),
            ];
            for (cell, wgt) in taps {
                cells.row_mut(cell).scaled_add(wgt, &d_out.row(i * w + j));
            }
        }
    }
    cells
}

fn view_cells(stack: &TeacherFeatureStack, view: usize) -> Array2<f64> {
    Array2::from_shape_fn((stack.height * stack.width, stack.channels), |(p, k)| {
        stack.views[view][p * stack.channels + k] as f64
    })
}

fn check_teacher(stack: &TeacherFeatureStack, proj: &AlignmentProjectors) -> Result<()> {
    if stack.channels != proj.teacher_proj.in_dim() {
        return Err(Error::shape("teacher channels", proj.teacher_proj.in_dim(), stack.channels));
    }
    Ok(())
}

/// Per-view `(target_h * target_w) x C_a` teacher maps: project each patch
/// cell, then upsample bilinearly.
pub fn project_teacher(
    stack: &TeacherFeatureStack,
    proj: &AlignmentProjectors,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<Array2<f64>>> {
    check_teacher(stack, proj)?;
    (0..stack.num_views())
        .map(|v| {
            let cells = proj.teacher_proj.forward_batch(view_cells(stack, v).view())?;
            Ok(upsample(&cells, stack.height, stack.width, target_h, target_w))
        })
        .collect()
}

/// Accumulates teacher projector gradients from per-view map gradients.
pub fn project_teacher_backward(
    stack: &TeacherFeatureStack,
    proj: &AlignmentProjectors,
    target_h: usize,
    target_w: usize,
    d_maps: &[Array2<f64>],
    grad: &mut AlignmentProjectors,
) -> Result<()> {
    check_teacher(stack, proj)?;
    for (v, d) in d_maps.iter().enumerate() {
        let d_cells = upsample_transpose(d, stack.height, stack.width, target_h, target_w);
        proj.teacher_proj
            .backward_batch(view_cells(stack, v).view(), d_cells.view(), &mut grad.teacher_proj);
    }
    Ok(())
}

fn feat_matrix(gaussians: &[GaussianPrimitive], dim: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((gaussians.len(), dim));
    for (i, g) in gaussians.iter().enumerate() {
        if g.feat.len() != dim {
            return Err(Error::shape("gaussian feature", dim, g.feat.len()));
        }
        m.row_mut(i).iter_mut().zip(&g.feat).for_each(|(a, b)| *a = *b);
    }
    Ok(m)
}

/// `N x C_a` student payloads `student_proj(feat_i)`.
pub fn project_student(gaussians: &[GaussianPrimitive], proj: &AlignmentProjectors) -> Result<Array2<f64>> {
    let feats = feat_matrix(gaussians, proj.student_proj.in_dim())?;
    proj.student_proj.forward_batch(feats.view())
}

/// Accumulates student projector gradients and returns per-Gaussian feature
/// gradients (`N x C_g`).
pub fn project_student_backward(
    gaussians: &[GaussianPrimitive],
    proj: &AlignmentProjectors,
    d_payloads: &Array2<f64>,
    grad: &mut AlignmentProjectors,
) -> Result<Array2<f64>> {
    let feats = feat_matrix(gaussians, proj.student_proj.in_dim())?;
    Ok(proj
        .student_proj
        .backward_batch(feats.view(), d_payloads.view(), &mut grad.student_proj))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillLoss {
    pub value: f64,
    /// Pixels that contributed to the mean.
    pub counted: usize,
    /// Valid pixels skipped for a near-zero teacher or student vector.
    pub excluded: usize,
}

fn check_maps(teacher: &[Array2<f64>], student: &[Array2<f64>], valid: &[Vec<bool>]) -> Result<()> {
    if teacher.len() != student.len() || teacher.len() != valid.len() {
        return Err(Error::shape("distillation views", teacher.len(), student.len().min(valid.len())));
    }
    for ((t, s), m) in teacher.iter().zip(student).zip(valid) {
        if t.dim() != s.dim() {
            return Err(Error::shape("distillation map", t.len(), s.len()));
        }
        if m.len() != t.nrows() {
            return Err(Error::shape("distillation mask", t.nrows(), m.len()));
        }
    }
    Ok(())
}

fn pixel_terms(t: &[f64], s: &[f64]) -> Option<(f64, f64, f64)> {
    let nt2 = t.iter().map(|x| x * x).sum::<f64>();
    let ns2 = s.iter().map(|x| x * x).sum::<f64>();
    let (nt, ns) = (nt2.sqrt(), ns2.sqrt());
    if nt < NORM_EPSILON || ns < NORM_EPSILON {
        return None;
    }
    let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
    // sqrt of the product keeps cos(x, x) == 1 exactly
    Some(((dot / (nt2 * ns2).sqrt()).clamp(-1.0, 1.0), nt, ns))
}

/// Mean of `1 - cos(T', S')` over valid pixels of every view, where both
/// vectors have norm at least [`NORM_EPSILON`]. Zero when nothing counts.
pub fn distillation_loss(teacher: &[Array2<f64>], student: &[Array2<f64>], valid: &[Vec<bool>]) -> Result<DistillLoss> {
    check_maps(teacher, student, valid)?;
    let mut sum = 0.0;
    let (mut counted, mut excluded) = (0, 0);
    for ((t, s), m) in teacher.iter().zip(student).zip(valid) {
        for (px, _) in m.iter().enumerate().filter(|(_, &ok)| ok) {
            match pixel_terms(t.row(px).as_slice().unwrap(), s.row(px).as_slice().unwrap()) {
                Some((cos, _, _)) => {
                    sum += 1.0 - cos;
                    counted += 1;
                }
                None => excluded += 1,
            }
        }
    }
    Ok(DistillLoss {
        value: if counted > 0 { sum / counted as f64 } else { 0.0 },
        counted,
        excluded,
    })
}

/// Gradients of [`distillation_loss`] (scaled by `scale`) with respect to the
/// teacher and student maps.
pub fn distillation_loss_backward(
    teacher: &[Array2<f64>],
    student: &[Array2<f64>],
    valid: &[Vec<bool>],
    scale: f64,
) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let loss = distillation_loss(teacher, student, valid)?;
    let mut d_t: Vec<Array2<f64>> = teacher.iter().map(|t| Array2::zeros(t.dim())).collect();
    let mut d_s: Vec<Array2<f64>> = student.iter().map(|s| Array2::zeros(s.dim())).collect();
    if loss.counted == 0 {
        return Ok((d_t, d_s));
    }
    let g = scale / loss.counted as f64;
    for (v, ((t, s), m)) in teacher.iter().zip(student).zip(valid).enumerate() {
        for (px, _) in m.iter().enumerate().filter(|(_, &ok)| ok) {
            let (tr, sr) = (t.row(px), s.row(px));
            let (tr, sr) = (tr.as_slice().unwrap(), sr.as_slice().unwrap());
            let Some((cos, nt, ns)) = pixel_terms(tr, sr) else { continue };
            let mut dt = d_t[v].row_mut(px);
            for k in 0..tr.len() {
                dt[k] = -g * (sr[k] / (nt * ns) - cos * tr[k] / (nt * nt));
            }
            let mut ds = d_s[v].row_mut(px);
            for k in 0..sr.len() {
                ds[k] = -g * (tr[k] / (nt * ns) - cos * sr[k] / (ns * ns));
            }
        }
    }
    Ok((d_t, d_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneRecipe};

    fn rand_maps(rng: &mut ChaCha8Rng, views: usize, px: usize, c: usize) -> Vec<Array2<f64>> {
        (0..views)
            .map(|_| Array2::from_shape_fn((px, c), |_| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn cosine_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_maps(&mut rng, 2, 12, 5);
        let valid = vec![vec![true; 12]; 2];
        assert_eq!(distillation_loss(&t, &t, &valid).unwrap().value, 0.0);
        let neg: Vec<_> = t.iter().map(|m| -m).collect();
        assert_eq!(distillation_loss(&t, &neg, &valid).unwrap().value, 2.0);

        let a = vec![Array2::from_shape_fn((4, 2), |(_, k)| if k == 0 { 3.0 } else { 0.0 })];
        let b = vec![Array2::from_shape_fn((4, 2), |(_, k)| if k == 1 { 0.5 } else { 0.0 })];
        assert_eq!(distillation_loss(&a, &b, &[vec![true; 4]]).unwrap().value, 1.0);

        let none = distillation_loss(&t, &neg, &vec![vec![false; 12]; 2]).unwrap();
        assert_eq!((none.value, none.counted), (0.0, 0));
    }

    #[test]
    fn near_zero_vectors_are_excluded() {
        let t = vec![Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap()];
        let s = vec![Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1e-12]).unwrap()];
        let l = distillation_loss(&t, &s, &[vec![true, true]]).unwrap();
        assert_eq!((l.value, l.counted, l.excluded), (0.0, 1, 1));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = rand_maps(&mut rng, 2, 6, 4);
        let s = rand_maps(&mut rng, 2, 6, 4);
        let valid: Vec<Vec<bool>> = (0..2).map(|v| (0..6).map(|p| (p + v) % 3 != 0).collect()).collect();
        let (dt, ds) = distillation_loss_backward(&t, &s, &valid, 1.0).unwrap();
        let f = |t: &[Array2<f64>], s: &[Array2<f64>]| distillation_loss(t, s, &valid).unwrap().value;
        let h = 1e-5;
        for v in 0..2 {
            for idx in [(0, 1), (2, 3), (4, 0), (5, 2)] {
                for which in 0..2 {
                    let (mut tp, mut sp) = (t.clone(), s.clone());
                    let (mut tm, mut sm) = (t.clone(), s.clone());
                    if which == 0 {
                        tp[v][idx] += h;
                        tm[v][idx] -= h;
                    } else {
                        sp[v][idx] += h;
                        sm[v][idx] -= h;
                    }
                    let num = (f(&tp, &sp) - f(&tm, &sm)) / (2.0 * h);
                    let ana = if which == 0 { dt[v][idx] } else { ds[v][idx] };
                    assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6), "{num} {ana}");
                }
            }
        }
    }

    #[test]
    fn bilinear_upsample_matches_direct_oracle() {
        let cells = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let out = upsample(&cells, 2, 2, 4, 4);
        let grid = [[1.0, 2.0], [3.0, 5.0]];
        for i in 0..4 {
            for j in 0..4 {
                let sy = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                let sx = ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                let expect = grid[0][0] * (1.0 - sy) * (1.0 - sx)
                    + grid[0][1] * (1.0 - sy) * sx
                    + grid[1][0] * sy * (1.0 - sx)
                    + grid[1][1] * sy * sx;
                assert!((out[(i * 4 + j, 0)] - expect).abs() <= 1e-12);
            }
        }
        assert_eq!(out[(0, 0)], 1.0);
        assert_eq!(out[(15, 0)], 5.0);
        assert_eq!(out[(5, 0)], 0.5625 * 1.0 + 0.1875 * 2.0 + 0.1875 * 3.0 + 0.0625 * 5.0);
    }

    #[test]
    fn teacher_projection_constants_and_single_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = AlignmentProjectors::new(6, 4, 3, &mut rng).unwrap();
        let stack = TeacherFeatureStack {
            height: 3,
            width: 2,
            channels: 6,
            block_index: 22,
            views: vec![vec![0.25; 36]],
        };
        let maps = project_teacher(&stack, &proj, 7, 5).unwrap();
        let expect = proj.teacher_proj.forward(&[0.25; 6]).unwrap();
        for row in maps[0].rows() {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        let one = TeacherFeatureStack {
            height: 1,
            width: 1,
            channels: 6,
            block_index: 22,
            views: vec![vec![0.1, -0.2, 0.3, 0.0, 0.5, 1.0]],
        };
        let maps = project_teacher(&one, &proj, 4, 4).unwrap();
        let expect = proj.teacher_proj.forward(&[0.1f32, -0.2, 0.3, 0.0, 0.5, 1.0].map(|x| x as f64)).unwrap();
        assert!(maps[0].rows().into_iter().all(|r| r.iter().zip(&expect).all(|(a, b)| a == b)));
        let bad = TeacherFeatureStack { channels: 5, views: vec![vec![0.0; 5]], ..one };
        assert!(matches!(project_teacher(&bad, &proj, 4, 4), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn teacher_projection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = AlignmentProjectors::new(3, 2, 2, &mut rng).unwrap();
        let stack = TeacherFeatureStack {
            height: 2,
            width: 3,
            channels: 3,
            block_index: 0,
            views: (0..2).map(|_| (0..18).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect(),
        };
        let weights = rand_maps(&mut rng, 2, 5 * 7, 2);
        let f = |p: &AlignmentProjectors| -> f64 {
            project_teacher(&stack, p, 5, 7)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(m, w)| (m * w).sum())
                .sum()
        };
        let mut grad = crate::nn::zeros_like(&proj);
        project_teacher_backward(&stack, &proj, 5, 7, &weights, &mut grad).unwrap();
        let flat = proj.flatten();
        let ana = grad.flatten();
        let h = 1e-5;
        for i in 0..flat.len() {
            let (mut p, mut m) = (proj.clone(), proj.clone());
            let mut fp = flat.clone();
            fp[i] += h;
            p.assign_flat(&fp);
            fp[i] -= 2.0 * h;
            m.assign_flat(&fp);
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!((num - ana[i]).abs() <= 1e-4 * num.abs().max(1e-6), "{i}: {num} {}", ana[i]);
        }
    }

    #[test]
    fn student_projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gs: Vec<GaussianPrimitive> = (0..3)
            .map(|i| GaussianPrimitive::isotropic([i as f64, 0.0, 0.0], 1.0, 0.5, vec![0.1 * i as f64, -0.3, 0.7]))
            .collect();
        let mut proj = AlignmentProjectors::new(4, 3, 3, &mut rng).unwrap();
        let p = project_student(&gs, &proj).unwrap();
        for (i, g) in gs.iter().enumerate() {
            let expect = proj.student_proj.forward(&g.feat).unwrap();
            assert!(p.row(i).iter().zip(&expect).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
        proj.student_proj.weight = Array2::eye(3);
        let p = project_student(&gs, &proj).unwrap();
        assert!(gs.iter().enumerate().all(|(i, g)| p.row(i).to_vec() == g.feat));
        proj.student_proj.fill(0.0);
        assert!(project_student(&gs, &proj).unwrap().iter().all(|&x| x == 0.0));
        let bad = AlignmentProjectors::new(4, 2, 3, &mut rng).unwrap();
        assert!(matches!(project_student(&gs, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn teacher_file_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = TeacherFeatureStack {
            height: 2,
            width: 3,
            channels: 4,
            block_index: 22,
            views: (0..2).map(|_| (0..24).map(|_| rng.gen::<f32>()).collect()).collect(),
        };
        let mut buf = Vec::new();
        stack.write(&mut buf).unwrap();
        assert_eq!(TeacherFeatureStack::read(&buf[..]).unwrap(), stack);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(TeacherFeatureStack::read(&bad[..]), Err(Error::BadMagic(_))));
        assert!(matches!(
            TeacherFeatureStack::read(&buf[..buf.len() - 3]),
            Err(Error::TruncatedFile(_))
        ));
        let mut nan = buf.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(TeacherFeatureStack::read(&nan[..]), Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn synthetic_teacher_is_deterministic_and_class_separated() {
        let recipe = SceneRecipe {
            frames: 5,
            ..Default::default()
        };
        let scene = generate_scene(&recipe).unwrap();
        let a = synth_teacher(&scene, &scene.cameras, 8, 64, 9).unwrap();
        let b = synth_teacher(&scene, &scene.cameras, 8, 64, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height, a.width, a.channels), (8, 14, 128));
        a.validate().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = embedding_table(16 * 4, 64, &mut rng);
        for c1 in 0..16 {
            for c2 in 0..16 {
                if c1 != c2 {
                    let cos: f64 = table[c1 * 4].iter().zip(&table[c2 * 4]).map(|(x, y)| x * y).sum();
                    assert!(cos.abs() < 0.5);
                }
            }
        }
        let mut seen = std::collections::HashMap::new();
        for v in 0..a.num_views() {
            for r in 0..a.height {
                for c in 0..a.width {
                    let cell = a.cell(v, r, c);
                    let key = cell.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                    seen.entry((v, key)).or_insert(0usize);
                }
            }
        }
        assert!(seen.len() > a.num_views(), "teacher should vary across patches");
        let mut no_frame0 = scene.clone();
        no_frame0.offsets = vec![1, 2, 3, 4, 5];
        assert!(matches!(
            synth_teacher(&no_frame0, &scene.cameras, 8, 64, 9),
            Err(Error::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn flow_bins() {
        assert_eq!([0.0, 0.49, 0.5, 1.9, 2.0, 7.9, 8.0, 100.0].map(flow_bin), [0, 0, 1, 1, 2, 2, 3, 3]);
    }
}
