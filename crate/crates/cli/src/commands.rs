use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dego::distillation::{synth_teacher, TeacherFeatureStack};
use dego::geom::{make_grid_spec, SemanticLabelGrid, VoxelGridSpec, FREE};
use dego::metrics::{aggregate, camera_rays, confusion_masked, ray_iou, visible_mask, EvalReport};
use dego::nn::Params;
use dego::objective::{train_from, Checkpoint, LogRecord, Model, Tensor};
use dego::rendering::{render_all, FloatImage, MIN_VALID_ALPHA};
use dego::splatting::argmax;
use dego::synth::{generate_scene, load_scene, save_scene, scene_hash, SceneRecipe, SyntheticScene};
use serde::{Deserialize, Serialize};

use crate::config::{load_taxonomy, parse_config, parse_json, read_text, Config, TeacherMode};
use crate::error::{CliError, Context};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVALS_FILE: &str = "evals.json";
pub const REPORT_FILE: &str = "eval.json";
pub const TEACHER_FILE: &str = "teacher.tf";
pub const VOXELS_FILE: &str = "prediction.vox";

const CONFIG_DIGEST: &str = "meta.config_digest";
const SCENE_DIGEST: &str = "meta.scene_digest";
const GRID: &str = "meta.grid";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn require_dir(path: &Path, kind: &'static str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::MissingFile {
            path: path.to_path_buf(),
            kind,
        })
    }
}

fn open_scene(dir: &Path) -> Result<SyntheticScene, CliError> {
    require_dir(dir, "scene")?;
    load_scene(dir).context("loading scene")
}

/// Generates a scene from `recipe` (the default recipe when `None`) and
/// writes it to `out`. Returns the scene digest.
pub fn gen_scene(recipe: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<String, CliError> {
    let mut recipe: SceneRecipe = match recipe {
        Some(p) => parse_json(&read_text(p, "recipe")?)?,
        None => SceneRecipe::default(),
    };
    if let Some(s) = seed {
        recipe.seed = s;
    }
    let scene = generate_scene(&recipe).context("generating scene")?;
    create_dir(out)?;
    save_scene(&scene, out).context("writing scene")
}

/// What `train` reports besides its files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub init_digest: String,
    pub param_digest: String,
    pub config_digest: String,
    pub scene_digest: String,
}

fn teacher_for(cfg: &Config, scene: &SyntheticScene) -> Result<Option<TeacherFeatureStack>, CliError> {
    let t = &cfg.teacher;
    match t.mode {
        TeacherMode::None => Ok(None),
        TeacherMode::Synthetic => synth_teacher(scene, &scene.cameras, t.patch_size, t.channels, t.seed)
            .context("building teacher")
            .map(Some),
        TeacherMode::File => {
            let Some(path) = &t.path else {
                return Err(CliError::TypeError {
                    path: "teacher.path".into(),
                    message: "required when teacher.mode is \"file\"".into(),
                });
            };
            if !path.is_file() {
                return Err(CliError::MissingFile {
                    path: path.clone(),
                    kind: "teacher",
                });
            }
            let stack = dego::distillation::load_teacher_features(path).context("reading teacher")?;
            if stack.num_views() != scene.cameras.len() {
                return Err(CliError::Core {
                    context: "reading teacher",
                    source: dego::Error::ShapeMismatch {
                        context: "teacher views",
                        expected: scene.cameras.len(),
                        actual: stack.num_views(),
                    },
                });
            }
            Ok(Some(stack))
        }
    }
}

fn grid_tensor(spec: &VoxelGridSpec) -> Tensor {
    let mut data = spec.min_corner.to_vec();
    data.extend_from_slice(&spec.max_corner);
    data.push(spec.voxel_size);
    Tensor {
        name: GRID.into(),
        dims: vec![7],
        data,
    }
}

fn parameter_digest<P: Params>(params: &P) -> String {
    Checkpoint::from_params(0, params).parameter_digest()
}

/// Trains on the configured scene and writes the checkpoint, the echoed
/// config, the per-step metric log and a summary into the output directory.
pub fn train(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<TrainSummary, CliError> {
    let mut cfg = parse_config(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o.to_path_buf();
    }
    load_taxonomy(cfg.taxonomy.as_deref())?;
    let scene = open_scene(&cfg.scene)?;
    let teacher = teacher_for(&cfg, &scene)?;
    if let Some(t) = &teacher {
        cfg.model.teacher_channels = t.channels;
    }
    let tcfg = cfg.train_config();
    tcfg.validate().context("validating config")?;

    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(CONFIG_FILE), cfg.to_json())?;
    let model = Model::new(&tcfg, &scene.spec, None).context("initializing model")?;
    let init_digest = parameter_digest(&model);

    let log_path = cfg.out.join(METRICS_FILE);
    let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = std::io::BufWriter::new(file);
    writeln!(log, "{}", LogRecord::HEADER).map_err(io_err(&log_path))?;
    let mut write_err = None;
    let every = cfg.train.log_every.max(1);
    let outcome = train_from(model, &scene, teacher.as_ref(), &tcfg, |rec| {
        if rec.step % every == 0 {
            log::info!("step {} loss {:e} lr {:e}", rec.step, rec.total, rec.lr);
        }
        if write_err.is_none() {
            write_err = writeln!(log, "{rec}").err();
        }
    })
    .context("training")?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path)(e));
    }
    log.flush().map_err(io_err(&log_path))?;

    let config_digest = cfg.digest();
    let scene_digest = scene_hash(&scene);
    let mut ckpt = Checkpoint::from_params(outcome.log.len() as u64, &outcome.model)
        .with_digest(CONFIG_DIGEST, &config_digest)
        .with_digest(SCENE_DIGEST, &scene_digest);
    ckpt.tensors.push(grid_tensor(&scene.spec));
    ckpt.save(&cfg.out.join(CHECKPOINT_FILE)).context("writing checkpoint")?;
    if !outcome.evals.is_empty() {
        let evals: Vec<_> = outcome.evals.iter().map(|e| (e.step, e.miou.clone())).collect();
        let text = serde_json::to_string_pretty(&evals).expect("evals serialize");
        write_file(&cfg.out.join(EVALS_FILE), text)?;
    }
    let summary = TrainSummary {
        steps: tcfg.steps,
        final_loss: outcome.log.last().map_or(0.0, |r| r.total),
        init_digest,
        param_digest: ckpt.parameter_digest(),
        config_digest,
        scene_digest,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&cfg.out.join(SUMMARY_FILE), text)?;
    Ok(summary)
}

/// A checkpoint with the config it was trained under.
pub struct LoadedModel {
    pub config: Config,
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub spec: VoxelGridSpec,
}

impl LoadedModel {
    fn check_scene(&self, scene: &SyntheticScene) -> Result<(), CliError> {
        let expected = self.checkpoint.digest_of(SCENE_DIGEST).unwrap_or_default();
        let found = scene_hash(scene);
        if expected != found {
            return Err(CliError::Core {
                context: "checking scene",
                source: dego::Error::DigestMismatch { expected, found },
            });
        }
        Ok(())
    }
}

/// Reads a checkpoint and the `config.json` written next to it, and checks
/// that the config is the one the checkpoint was trained with.
pub fn load_checkpoint(path: &Path) -> Result<LoadedModel, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingFile {
            path: path.to_path_buf(),
            kind: "checkpoint",
        });
    }
    let checkpoint = Checkpoint::load(path).context("reading checkpoint")?;
    let config_path = path.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    let config = parse_config(&config_path)?;
    let expected = checkpoint.digest_of(CONFIG_DIGEST).unwrap_or_default();
    let found = config.digest();
    if expected != found {
        return Err(CliError::Core {
            context: "checking config",
            source: dego::Error::DigestMismatch { expected, found },
        });
    }
    let grid = checkpoint
        .tensor(GRID)
        .filter(|t| t.data.len() == 7)
        .ok_or_else(|| CliError::Core {
            context: "reading checkpoint",
            source: dego::Error::Invalid(format!("missing {GRID}")),
        })?;
    let d = &grid.data;
    let spec = make_grid_spec([d[0], d[1], d[2]], [d[3], d[4], d[5]], d[6]).context("reading checkpoint")?;
    let mut model = Model::new(&config.train_config(), &spec, None).context("rebuilding model")?;
    checkpoint.load_into(&mut model).context("reading checkpoint")?;
    Ok(LoadedModel {
        config,
        checkpoint,
        model,
        spec,
    })
}

/// Replaces the model prediction; for checking the metric plumbing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DebugPrediction {
    GroundTruth,
    AllFree,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub visible_only: bool,
    pub rayiou: bool,
    pub debug_prediction: Option<DebugPrediction>,
}

/// Scores the single-frame prediction at offset 0 against the scene's ground
/// truth and writes the report to `out`.
pub fn eval(checkpoint: &Path, scene: &Path, opts: &EvalOptions, out: &Path) -> Result<EvalReport, CliError> {
    let loaded = load_checkpoint(checkpoint)?;
    let scene = open_scene(scene)?;
    loaded.check_scene(&scene)?;
    let cfg = &loaded.config;
    let taxonomy = load_taxonomy(cfg.taxonomy.as_deref())?;
    let gt = scene.frame(0).context("evaluating")?;
    let pred = match opts.debug_prediction {
        Some(DebugPrediction::GroundTruth) => gt.clone(),
        Some(DebugPrediction::AllFree) => SemanticLabelGrid::free(gt.spec.clone()),
        None => loaded.model.predict(0, &scene.spec, &cfg.train_config()).context("predicting")?,
    };
    let mask = (opts.visible_only || cfg.eval.visible_only).then(|| visible_mask(gt, &scene.cameras));
    let counts = confusion_masked(&pred, gt, &taxonomy, mask.as_deref()).context("scoring")?;
    let summary = aggregate(&counts, &taxonomy);
    let rays = if opts.rayiou || cfg.eval.rayiou {
        let rays = camera_rays(&scene.cameras);
        Some(ray_iou(&pred, gt, &rays, &cfg.eval.ray_thresholds, &taxonomy).context("scoring rays")?)
    } else {
        None
    };
    let report = EvalReport::new(&summary, &taxonomy, rays.as_ref());
    create_dir(out)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join(REPORT_FILE), text)?;
    Ok(report)
}

/// Paths of the three maps written by `render`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFiles {
    pub semantic: PathBuf,
    pub depth: PathBuf,
    pub alpha: PathBuf,
}

/// Renders the deformed Gaussians at frame offset `frame` from camera
/// `camera`. Pixels with too little coverage get class 255.
pub fn render(checkpoint: &Path, scene: &Path, frame: i32, camera: usize, out: &Path) -> Result<RenderedFiles, CliError> {
    let loaded = load_checkpoint(checkpoint)?;
    let scene = open_scene(scene)?;
    loaded.check_scene(&scene)?;
    let cam = scene.cameras.get(camera).ok_or(CliError::Core {
        context: "selecting camera",
        source: dego::Error::IndexOutOfRange {
            what: "camera",
            index: camera,
            len: scene.cameras.len(),
        },
    })?;
    let model = &loaded.model;
    let prims = model.deformed(frame).context("deforming")?;
    let payload = model.semantic_payloads(&prims).context("rendering")?;
    let maps = render_all(&prims, &payload, None, cam, &loaded.config.render).context("rendering")?;
    let (h, w) = (cam.height, cam.width);
    let labels: Vec<f64> = (0..h * w)
        .map(|px| {
            if maps.alpha[px] >= MIN_VALID_ALPHA {
                argmax(maps.semantic.pixel(px / w, px % w)) as f64
            } else {
                FREE as f64
            }
        })
        .collect();
    create_dir(out)?;
    let stem = format!("frame_{frame}_cam_{camera}");
    let files = RenderedFiles {
        semantic: out.join(format!("{stem}.semantic.img")),
        depth: out.join(format!("{stem}.depth.img")),
        alpha: out.join(format!("{stem}.alpha.img")),
    };
    FloatImage::from_f64(h, w, 1, &labels).save(&files.semantic).context("writing image")?;
    FloatImage::from_f64(h, w, 1, &maps.depth.normalized()).save(&files.depth).context("writing image")?;
    FloatImage::from_f64(h, w, 1, &maps.alpha).save(&files.alpha).context("writing image")?;
    Ok(files)
}

/// Teacher features for the reference frame of a scene.
pub fn dump_teacher(
    scene: &Path,
    mode: &str,
    patch_size: usize,
    channels: usize,
    seed: u64,
    out: &Path,
) -> Result<PathBuf, CliError> {
    if mode != "synthetic" {
        return Err(CliError::TypeError {
            path: "mode".into(),
            message: format!("unsupported teacher mode `{mode}` (only `synthetic`)"),
        });
    }
    let scene = open_scene(scene)?;
    let stack = synth_teacher(&scene, &scene.cameras, patch_size, channels, seed).context("building teacher")?;
    create_dir(out)?;
    let path = out.join(TEACHER_FILE);
    stack.save(&path).context("writing teacher")?;
    Ok(path)
}

/// Single-frame occupancy prediction at offset 0, as a voxel file.
pub fn export_voxels(checkpoint: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let loaded = load_checkpoint(checkpoint)?;
    let pred = loaded
        .model
        .predict(0, &loaded.spec, &loaded.config.train_config())
        .context("predicting")?;
    create_dir(out)?;
    let path = out.join(VOXELS_FILE);
    let mut buf = Vec::new();
    pred.write_vox(&mut buf).map_err(io_err(&path))?;
    write_file(&path, buf)?;
    Ok(path)
}
