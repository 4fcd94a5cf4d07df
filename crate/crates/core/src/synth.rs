//! Deterministic synthetic dynamic scenes: analytic shapes voxelized per
//! frame, an inward camera rig and ray-cast pseudo depth/segmentation labels.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geom::camera::CameraModel;
use crate::geom::grid::{make_grid_spec, SemanticLabelGrid, VoxelGridSpec, FREE};
use crate::geom::raycast::first_hit;
use crate::rendering::FloatImage;
use crate::taxonomy::{self, IGNORE, NUM_CLASSES};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Box { center: [f64; 3], half: [f64; 3] },
    /// Vertical cylinder.
    Cylinder { center: [f64; 2], radius: f64, z_min: f64, z_max: f64 },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Box { center, half } => (0..3).all(|k| (p[k] - center[k]).abs() <= half[k]),
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                dx * dx + dy * dy <= radius * radius && p[2] >= z_min && p[2] <= z_max
            }
        }
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Shape::Box { center, half } => (
                std::array::from_fn(|k| center[k] - half[k]),
                std::array::from_fn(|k| center[k] + half[k]),
            ),
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => (
                [center[0] - radius, center[1] - radius, z_min],
                [center[0] + radius, center[1] + radius, z_max],
            ),
        }
    }

    pub fn reference_point(&self) -> [f64; 3] {
        match *self {
            Shape::Box { center, .. } => center,
            Shape::Cylinder {
                center, z_min, z_max, ..
            } => [center[0], center[1], 0.5 * (z_min + z_max)],
        }
    }

    /// Translated by `d` and scaled by `s` about its reference point.
    pub fn transformed(&self, d: [f64; 3], s: f64) -> Shape {
        match *self {
            Shape::Box { center, half } => Shape::Box {
                center: std::array::from_fn(|k| center[k] + d[k]),
                half: half.map(|h| h * s),
            },
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let zc = 0.5 * (z_min + z_max) + d[2];
                let hz = 0.5 * (z_max - z_min) * s;
                Shape::Cylinder {
                    center: [center[0] + d[0], center[1] + d[1]],
                    radius: radius * s,
                    z_min: zc - hz,
                    z_max: zc + hz,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticObject {
    pub class: u8,
    pub shape: Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// Displacement `velocity * t` (meters per frame).
    Linear { velocity: [f64; 3] },
    /// Displacement `amplitude * sin(2 pi t / period)`.
    Sinusoidal { amplitude: [f64; 3], period: f64 },
}

impl Trajectory {
    pub fn displacement(&self, t: f64) -> [f64; 3] {
        match *self {
            Trajectory::Linear { velocity } => velocity.map(|v| v * t),
            Trajectory::Sinusoidal { amplitude, period } => {
                let s = (2.0 * std::f64::consts::PI * t / period).sin();
                amplitude.map(|a| a * s)
            }
        }
    }
}

/// Shape-scale oscillation `1 + amplitude * sin(2 pi t / period + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pulse {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl Pulse {
    pub fn scale(&self, t: f64) -> f64 {
        1.0 + self.amplitude * (2.0 * std::f64::consts::PI * t / self.period + self.phase).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mover {
    pub class: u8,
    /// Shape at offset 0.
    pub shape: Shape,
    pub trajectory: Trajectory,
    #[serde(default)]
    pub pulse: Option<Pulse>,
}

impl Mover {
    pub fn shape_at(&self, t: f64) -> Shape {
        let s = self.pulse.map_or(1.0, |p| p.scale(t));
        self.shape.transformed(self.trajectory.displacement(t), s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigKind {
    Inward,
    Outward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    pub kind: RigKind,
    pub count: usize,
    /// Horizontal distance of each camera from the rig center.
    pub radius: f64,
    pub camera_height: f64,
    pub target: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            kind: RigKind::Inward,
            count: 4,
            radius: 12.0,
            camera_height: 4.0,
            target: [0.0, 0.0, 1.0],
            focal: 40.0,
            width: 112,
            height: 64,
        }
    }
}

impl CameraRig {
    pub fn cameras(&self) -> Result<Vec<CameraModel>> {
        (0..self.count)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / self.count as f64;
                let (c, s) = (a.cos(), a.sin());
                let ring = [self.target[0] + self.radius * c, self.target[1] + self.radius * s, self.camera_height];
                let (eye, look) = match self.kind {
                    RigKind::Inward => (ring, self.target),
                    RigKind::Outward => {
                        let eye = [self.target[0], self.target[1], self.camera_height];
                        (eye, [ring[0], ring[1], self.target[2]])
                    }
                };
                CameraModel::look_at(eye, look, [0.0, 0.0, 1.0], self.focal, self.width, self.height)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelNoise {
    pub flip_rate: f64,
    pub depth_jitter: f64,
}

impl Default for LabelNoise {
    fn default() -> Self {
        LabelNoise {
            flip_rate: 0.0,
            depth_jitter: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecipe {
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
    pub voxel_size: f64,
}

impl GridRecipe {
    pub fn spec(&self) -> Result<VoxelGridSpec> {
        make_grid_spec(self.min_corner, self.max_corner, self.voxel_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRecipe {
    pub seed: u64,
    pub grid: GridRecipe,
    /// Odd frame count; offsets run `-(n/2) ..= n/2`.
    pub frames: usize,
    pub statics: Vec<StaticObject>,
    pub movers: Vec<Mover>,
    pub rig: CameraRig,
    pub noise: LabelNoise,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        use taxonomy::*;
        let slab = |class, x0: f64, x1: f64, y0: f64, y1: f64| StaticObject {
            class,
            shape: Shape::Box {
                center: [0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.25],
                half: [0.5 * (x1 - x0), 0.5 * (y1 - y0), 0.25],
            },
        };
        let boxed = |class, center, half| StaticObject {
            class,
            shape: Shape::Box { center, half },
        };
        SceneRecipe {
            seed: 0,
            grid: GridRecipe {
                min_corner: [-8.0, -8.0, 0.0],
                max_corner: [8.0, 8.0, 4.0],
                voxel_size: 0.5,
            },
            frames: 17,
            statics: vec![
                slab(DRIVEABLE_SURFACE, -8.0, 8.0, -8.0, 8.0),
                slab(SIDEWALK, -8.0, 8.0, 5.0, 8.0),
                slab(TERRAIN, -8.0, -5.0, -8.0, -3.0),
                boxed(MANMADE, [5.5, 6.5, 2.0], [2.0, 1.5, 1.5]),
                StaticObject {
                    class: VEGETATION,
                    shape: Shape::Cylinder {
                        center: [-5.5, 5.5],
                        radius: 1.5,
                        z_min: 0.5,
                        z_max: 3.5,
                    },
                },
                boxed(BARRIER, [-2.0, -6.0, 0.75], [2.0, 0.25, 0.25]),
                boxed(TRAFFIC_CONE, [2.5, -6.5, 0.75], [0.25, 0.25, 0.25]),
                boxed(CAR, [4.0, -3.5, 1.0], [1.5, 0.75, 0.5]),
            ],
            movers: vec![
                Mover {
                    class: PEDESTRIAN,
                    shape: Shape::Box {
                        center: [-1.0, 0.0, 1.5],
                        half: [1.0, 0.75, 1.0],
                    },
                    trajectory: Trajectory::Linear {
                        velocity: [0.25, 0.1, 0.0],
                    },
                    pulse: Some(Pulse {
                        amplitude: 0.2,
                        period: 8.0,
                        phase: 0.0,
                    }),
                },
                Mover {
                    class: CAR,
                    shape: Shape::Box {
                        center: [0.0, 3.0, 1.0],
                        half: [1.5, 0.75, 0.5],
                    },
                    trajectory: Trajectory::Linear {
                        velocity: [-0.4, 0.0, 0.0],
                    },
                    pulse: None,
                },
            ],
            rig: CameraRig::default(),
            noise: LabelNoise::default(),
        }
    }
}

impl SceneRecipe {
    pub fn offsets(&self) -> Vec<i32> {
        let half = (self.frames / 2) as i32;
        (-half..=half).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames % 2 == 0 {
            return Err(Error::Invalid(format!("frame count {} must be odd", self.frames)));
        }
        let spec = self.grid.spec()?;
        for o in self.statics.iter().map(|s| s.class).chain(self.movers.iter().map(|m| m.class)) {
            if o as usize >= NUM_CLASSES {
                return Err(Error::Invalid(format!("class id {o} out of range")));
            }
        }
        for (i, m) in self.movers.iter().enumerate() {
            if !taxonomy::is_movable(m.class) {
                return Err(Error::Invalid(format!("mover {i} has non-movable class {}", m.class)));
            }
            for t in self.offsets() {
                let (lo, hi) = m.shape_at(t as f64).bounds();
                let inside = (0..3).all(|k| lo[k] >= spec.min_corner[k] && hi[k] <= spec.max_corner[k]);
                if !inside {
                    return Err(Error::OutOfGrid { object: i, offset: t });
                }
            }
        }
        Ok(())
    }

    /// Object ids: statics first, then movers.
    pub fn object_count(&self) -> usize {
        self.statics.len() + self.movers.len()
    }

    fn objects_at(&self, t: f64) -> Vec<(u8, Shape)> {
        self.statics
            .iter()
            .map(|s| (s.class, s.shape))
            .chain(self.movers.iter().map(|m| (m.class, m.shape_at(t))))
            .collect()
    }

    /// Total path length of each object's reference point over the clip.
    pub fn object_flow(&self) -> Vec<f64> {
        let offsets = self.offsets();
        let mut flow = vec![0.0; self.statics.len()];
        for m in &self.movers {
            let mut len = 0.0;
            for w in offsets.windows(2) {
                let a = m.trajectory.displacement(w[0] as f64);
                let b = m.trajectory.displacement(w[1] as f64);
                len += (0..3).map(|k| (b[k] - a[k]).powi(2)).sum::<f64>().sqrt();
            }
            flow.push(len);
        }
        flow
    }
}

/// Per-voxel labels and object ids (`u16::MAX` for none) at offset `t`.
pub fn voxelize(recipe: &SceneRecipe, spec: &VoxelGridSpec, t: f64) -> (SemanticLabelGrid, Vec<u16>) {
    let mut grid = SemanticLabelGrid::free(spec.clone());
    let mut ids = vec![u16::MAX; spec.num_voxels()];
    for (obj, (class, shape)) in recipe.objects_at(t).into_iter().enumerate() {
        let (lo, hi) = shape.bounds();
        let range = |k: usize| {
            let a = ((lo[k] - spec.min_corner[k]) / spec.voxel_size - 0.5).ceil().max(0.0) as usize;
            let b = ((hi[k] - spec.min_corner[k]) / spec.voxel_size - 0.5)
                .floor()
                .min(spec.dims[k] as f64 - 1.0);
            (a, b)
        };
        let ranges = [range(0), range(1), range(2)];
        if ranges.iter().any(|&(a, b)| b < a as f64) {
            continue;
        }
        for x in ranges[0].0..=ranges[0].1 as usize {
            for y in ranges[1].0..=ranges[1].1 as usize {
                for z in ranges[2].0..=ranges[2].1 as usize {
                    if shape.contains(spec.voxel_center([x, y, z])) {
                        grid.set([x, y, z], class);
                        ids[spec.linear_index([x, y, z])] = obj as u16;
                    }
                }
            }
        }
    }
    (grid, ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub width: usize,
    pub height: usize,
    /// Camera z-depth of the first hit in meters; 0 where nothing is hit.
    pub depth: Vec<f32>,
    /// Class of the first hit, or [`IGNORE`].
    pub seg: Vec<u8>,
}

/// First-hit voxel for every pixel of `camera`, row-major.
pub fn pixel_hits(grid: &SemanticLabelGrid, camera: &CameraModel) -> Vec<Option<crate::geom::RayHit>> {
    let mut out = Vec::with_capacity(camera.num_pixels());
    for row in 0..camera.height {
        for col in 0..camera.width {
            let (o, d) = camera.pixel_ray(col, row);
            out.push(first_hit(&grid.spec, &o, &d, |v| grid.is_occupied(v)));
        }
    }
    out
}

/// Ray-cast depth and segmentation of one frame as seen by `camera`.
pub fn pseudo_labels(grid: &SemanticLabelGrid, camera: &CameraModel) -> PseudoLabels {
    let mut depth = Vec::with_capacity(camera.num_pixels());
    let mut seg = Vec::with_capacity(camera.num_pixels());
    let hits = pixel_hits(grid, camera);
    for (px, hit) in hits.into_iter().enumerate() {
        let (col, row) = (px % camera.width, px / camera.width);
        match hit {
            Some(h) => {
                let (o, d) = camera.pixel_ray(col, row);
                depth.push(camera.depth_along(&o, &d, h.t) as f32);
                seg.push(grid.get(h.voxel));
            }
            None => {
                depth.push(0.0);
                seg.push(IGNORE);
            }
        }
    }
    PseudoLabels {
        width: camera.width,
        height: camera.height,
        depth,
        seg,
    }
}

fn apply_noise(labels: &mut PseudoLabels, noise: &LabelNoise, rng: &mut ChaCha8Rng) {
    if noise.flip_rate <= 0.0 && noise.depth_jitter <= 0.0 {
        return;
    }
    for px in 0..labels.seg.len() {
        if labels.seg[px] == IGNORE {
            continue;
        }
        if noise.flip_rate > 0.0 && rng.gen::<f64>() < noise.flip_rate {
            labels.seg[px] = rng.gen_range(0..NUM_CLASSES as u8);
        }
        if noise.depth_jitter > 0.0 {
            let j = rng.gen_range(-noise.depth_jitter..noise.depth_jitter);
            labels.depth[px] = (labels.depth[px] as f64 + j).max(1e-3) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub recipe: SceneRecipe,
    pub spec: VoxelGridSpec,
    pub cameras: Vec<CameraModel>,
    pub offsets: Vec<i32>,
    /// Ground truth per frame, in offset order.
    pub frames: Vec<SemanticLabelGrid>,
    /// Object id per voxel per frame (`u16::MAX` = none).
    pub instances: Vec<Vec<u16>>,
    /// `labels[frame][camera]`.
    pub labels: Vec<Vec<PseudoLabels>>,
}

impl SyntheticScene {
    pub fn frame_index(&self, offset: i32) -> Option<usize> {
        self.offsets.iter().position(|&o| o == offset)
    }

    pub fn frame(&self, offset: i32) -> Result<&SemanticLabelGrid> {
        self.frame_index(offset)
            .map(|k| &self.frames[k])
            .ok_or_else(|| Error::MissingGroundTruth(format!("frame offset {offset}")))
    }

    pub fn labels_at(&self, offset: i32) -> Result<&[PseudoLabels]> {
        self.frame_index(offset)
            .and_then(|k| self.labels.get(k))
            .map(|v| &v[..])
            .ok_or_else(|| Error::MissingGroundTruth(format!("labels at frame offset {offset}")))
    }
}

pub fn generate_scene(recipe: &SceneRecipe) -> Result<SyntheticScene> {
    recipe.validate()?;
    let spec = recipe.grid.spec()?;
    let cameras = recipe.rig.cameras()?;
    let offsets = recipe.offsets();
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut frames = Vec::with_capacity(offsets.len());
    let mut instances = Vec::with_capacity(offsets.len());
    let mut labels = Vec::with_capacity(offsets.len());
    for &t in &offsets {
        let (grid, ids) = voxelize(recipe, &spec, t as f64);
        let per_cam = cameras
            .iter()
            .map(|cam| {
                let mut l = pseudo_labels(&grid, cam);
                apply_noise(&mut l, &recipe.noise, &mut rng);
                l
            })
            .collect();
        frames.push(grid);
        instances.push(ids);
        labels.push(per_cam);
    }
    Ok(SyntheticScene {
        recipe: recipe.clone(),
        spec,
        cameras,
        offsets,
        frames,
        instances,
        labels,
    })
}

/// SHA-256 over grid spec, frame labels, cameras and label maps, in a fixed
/// little-endian byte layout.
pub fn scene_hash(scene: &SyntheticScene) -> String {
    let mut h = Sha256::new();
    let spec = &scene.spec;
    for v in spec.min_corner.iter().chain(&spec.max_corner).chain([&spec.voxel_size]) {
        h.update(v.to_le_bytes());
    }
    for d in spec.dims {
        h.update((d as u64).to_le_bytes());
    }
    h.update((scene.offsets.len() as u64).to_le_bytes());
    for o in &scene.offsets {
        h.update(o.to_le_bytes());
    }
    for f in &scene.frames {
        h.update(&f.labels);
    }
    h.update((scene.cameras.len() as u64).to_le_bytes());
    for c in &scene.cameras {
        for v in c.k.iter().flatten().chain(c.extrinsic.iter().flatten()) {
            h.update(v.to_le_bytes());
        }
        h.update((c.width as u64).to_le_bytes());
        h.update((c.height as u64).to_le_bytes());
    }
    for per_cam in &scene.labels {
        for l in per_cam {
            for d in &l.depth {
                h.update(d.to_bits().to_le_bytes());
            }
            h.update(&l.seg);
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneManifest {
    recipe: SceneRecipe,
    spec: VoxelGridSpec,
    offsets: Vec<i32>,
    cameras: Vec<CameraModel>,
    digest: String,
}

fn frame_path(dir: &Path, k: usize) -> std::path::PathBuf {
    dir.join("gt").join(format!("frame_{k}.vox"))
}

fn label_path(dir: &Path, k: usize, v: usize, kind: &str) -> std::path::PathBuf {
    dir.join("labels").join(format!("frame_{k}_cam_{v}.{kind}.img"))
}

/// Writes `scene.json`, `gt/frame_{k}.vox` and `labels/frame_{k}_cam_{v}.{depth,seg}.img`.
pub fn save_scene(scene: &SyntheticScene, dir: &Path) -> Result<String> {
    for sub in ["gt", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (k, grid) in scene.frames.iter().enumerate() {
        let p = frame_path(dir, k);
        let mut buf = Vec::new();
        grid.write_vox(&mut buf).map_err(|e| Error::io(&p, e))?;
        fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
        for (v, l) in scene.labels[k].iter().enumerate() {
            let depth = FloatImage {
                height: l.height,
                width: l.width,
                channels: 1,
                data: l.depth.clone(),
            };
            depth.save(&label_path(dir, k, v, "depth"))?;
            let seg = FloatImage {
                height: l.height,
                width: l.width,
                channels: 1,
                data: l.seg.iter().map(|&s| s as f32).collect(),
            };
            seg.save(&label_path(dir, k, v, "seg"))?;
        }
    }
    let digest = scene_hash(scene);
    let manifest = SceneManifest {
        recipe: scene.recipe.clone(),
        spec: scene.spec.clone(),
        offsets: scene.offsets.clone(),
        cameras: scene.cameras.clone(),
        digest: digest.clone(),
    };
    let p = dir.join("scene.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(digest)
}

fn missing(p: &Path) -> Error {
    Error::MissingGroundTruth(p.display().to_string())
}

/// Loads a scene directory and checks its digest. Object ids are regenerated
/// from the stored recipe.
pub fn load_scene(dir: &Path) -> Result<SyntheticScene> {
    let p = dir.join("scene.json");
    let text = fs::read_to_string(&p).map_err(|_| missing(&p))?;
    let manifest: SceneManifest = serde_json::from_str(&text)?;
    let spec = manifest.spec.clone();
    let mut frames = Vec::new();
    let mut instances = Vec::new();
    let mut labels = Vec::new();
    for (k, &t) in manifest.offsets.iter().enumerate() {
        let p = frame_path(dir, k);
        let bytes = fs::read(&p).map_err(|_| missing(&p))?;
        frames.push(SemanticLabelGrid::read_vox(spec.clone(), &bytes[..])?);
        instances.push(voxelize(&manifest.recipe, &spec, t as f64).1);
        let mut per_cam = Vec::new();
        for (v, cam) in manifest.cameras.iter().enumerate() {
            let dp = label_path(dir, k, v, "depth");
            let sp = label_path(dir, k, v, "seg");
            if !dp.exists() {
                return Err(missing(&dp));
            }
            if !sp.exists() {
                return Err(missing(&sp));
            }
            let depth = FloatImage::load(&dp)?;
            let seg = FloatImage::load(&sp)?;
            for img in [&depth, &seg] {
                if img.height != cam.height || img.width != cam.width || img.channels != 1 {
                    return Err(Error::MissingGroundTruth(format!("label map shape for frame {k} camera {v}")));
                }
            }
            per_cam.push(PseudoLabels {
                width: cam.width,
                height: cam.height,
                depth: depth.data,
                seg: seg.data.iter().map(|&s| s as u8).collect(),
            });
        }
        labels.push(per_cam);
    }
    let scene = SyntheticScene {
        recipe: manifest.recipe,
        spec,
        cameras: manifest.cameras,
        offsets: manifest.offsets,
        frames,
        instances,
        labels,
    };
    let found = scene_hash(&scene);
    if found != manifest.digest {
        return Err(Error::DigestMismatch {
            expected: manifest.digest,
            found,
        });
    }
    Ok(scene)
}

/// Mean voxel-center position of the voxels owned by object `id`.
pub fn object_centroid(scene: &SyntheticScene, frame: usize, id: u16) -> Option<Vector3<f64>> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for (v, &o) in scene.instances[frame].iter().enumerate() {
        if o == id {
            sum += Vector3::from(scene.spec.voxel_center(scene.spec.unravel(v)));
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn count_label(grid: &SemanticLabelGrid, class: u8) -> usize {
    grid.labels.iter().filter(|&&l| l == class && l != FREE).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{CAR, PEDESTRIAN};

    fn empty_recipe() -> SceneRecipe {
        SceneRecipe {
            statics: vec![],
            movers: vec![],
            frames: 3,
            ..Default::default()
        }
    }

    #[test]
    fn unit_box_labels_eight_voxels() {
        let mut r = empty_recipe();
        r.grid = GridRecipe {
            min_corner: [0.0; 3],
            max_corner: [4.0; 3],
            voxel_size: 0.5,
        };
        r.statics.push(StaticObject {
            class: CAR,
            shape: Shape::Box {
                center: [2.0, 2.0, 2.0],
                half: [0.5; 3],
            },
        });
        r.rig.target = [2.0, 2.0, 2.0];
        let scene = generate_scene(&r).unwrap();
        for f in &scene.frames {
            assert_eq!(count_label(f, CAR), 8);
        }
    }

    #[test]
    fn linear_mover_centroid_follows_velocity() {
        let mut r = empty_recipe();
        r.frames = 5;
        r.movers.push(Mover {
            class: CAR,
            shape: Shape::Box {
                center: [0.0, 0.0, 1.5],
                half: [1.0, 0.75, 0.5],
            },
            trajectory: Trajectory::Linear {
                velocity: [0.6, -0.3, 0.0],
            },
            pulse: None,
        });
        let scene = generate_scene(&r).unwrap();
        let id = 0;
        for k in 0..4 {
            let a = object_centroid(&scene, k, id).unwrap();
            let b = object_centroid(&scene, k + 1, id).unwrap();
            let d = b - a;
            assert!((d.x - 0.6).abs() <= 0.25 && (d.y + 0.3).abs() <= 0.25, "{d:?}");
        }
    }

    #[test]
    fn out_of_grid_mover_is_rejected() {
        let mut r = empty_recipe();
        r.frames = 17;
        r.movers.push(Mover {
            class: PEDESTRIAN,
            shape: Shape::Box {
                center: [0.0, 0.0, 1.5],
                half: [0.5; 3],
            },
            trajectory: Trajectory::Linear {
                velocity: [1.0, 0.0, 0.0],
            },
            pulse: None,
        });
        assert!(matches!(generate_scene(&r), Err(Error::OutOfGrid { object: 0, .. })));
    }

    #[test]
    fn wall_depth_matches_plane_distance() {
        let mut r = empty_recipe();
        r.grid = GridRecipe {
            min_corner: [-4.0, -4.0, 0.0],
            max_corner: [4.0, 4.0, 8.0],
            voxel_size: 0.5,
        };
        // wall occupying z in [5, 5.5)
        r.statics.push(StaticObject {
            class: 13,
            shape: Shape::Box {
                center: [0.0, 0.0, 5.25],
                half: [4.0, 4.0, 0.25],
            },
        });
        let spec = r.grid.spec().unwrap();
        let (grid, _) = voxelize(&r, &spec, 0.0);
        let k = nalgebra::Matrix3::new(10.0, 0.0, 4.0, 0.0, 10.0, 4.0, 0.0, 0.0, 1.0);
        let mut e = nalgebra::Matrix4::identity();
        e[(0, 3)] = 0.25;
        e[(1, 3)] = 0.25;
        let cam = CameraModel::new(k, e, 8, 8).unwrap();
        let l = pseudo_labels(&grid, &cam);
        let center = 4 * 8 + 4;
        assert!((l.depth[center] - 5.0).abs() <= 0.25, "{}", l.depth[center]);
        assert_eq!(l.seg[center], 13);

        let empty = SemanticLabelGrid::free(spec);
        let l = pseudo_labels(&empty, &cam);
        assert!(l.seg.iter().all(|&s| s == IGNORE) && l.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let r = SceneRecipe {
            frames: 3,
            ..Default::default()
        };
        let a = generate_scene(&r).unwrap();
        let b = generate_scene(&r).unwrap();
        assert_eq!(scene_hash(&a), scene_hash(&b));
        let mut c = a.clone();
        let v = c.frames[1].labels.iter().position(|&l| l != FREE).unwrap();
        c.frames[1].labels[v] = FREE;
        assert_ne!(scene_hash(&a), scene_hash(&c));

        let dir = tempfile::tempdir().unwrap();
        let digest = save_scene(&a, dir.path()).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(digest, scene_hash(&loaded));
        assert_eq!(loaded, a);
    }

    #[test]
    fn default_recipe_is_valid_and_labels_consistent() {
        let r = SceneRecipe {
            frames: 5,
            ..Default::default()
        };
        let scene = generate_scene(&r).unwrap();
        for per_cam in &scene.labels {
            for l in per_cam {
                for (d, s) in l.depth.iter().zip(&l.seg) {
                    assert_eq!(*s != IGNORE, *d > 0.0);
                }
            }
        }
        assert!(count_label(&scene.frames[2], PEDESTRIAN) > 0);
        SceneRecipe::default().validate().unwrap();
    }
}
