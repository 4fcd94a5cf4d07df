use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::losses::LossWeights;
use super::model::{LossReport, Model, ModelConfig, Supervision};
use super::optim::{adam_step, lr_at, OptimizerConfig, OptimizerState};
use crate::deformation::{DeformationConfig, DeformationLossWeights};
use crate::distillation::TeacherFeatureStack;
use crate::encoding::EncodingConfig;
use crate::metrics::miou;
use crate::nn::Params;
use crate::rendering::RenderConfig;
use crate::splatting::SplatConfig;
use crate::synth::SyntheticScene;
use crate::taxonomy::ClassTaxonomy;
use crate::{Error, Result};

pub const DEFAULT_FRAME_OFFSETS: [i32; 8] = [-8, -6, -4, -2, 0, 2, 4, 6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    /// Offsets deformed and supervised at every step.
    pub frame_offsets: Vec<i32>,
    /// Evaluate synthetic mIoU every this many steps (0 = never).
    pub eval_every: u64,
    pub eval_offsets: Vec<i32>,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub deformation_loss: DeformationLossWeights,
    pub deformation: DeformationConfig,
    pub encoding: EncodingConfig,
    pub splat: SplatConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            frame_offsets: DEFAULT_FRAME_OFFSETS.to_vec(),
            eval_every: 0,
            eval_offsets: vec![0],
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            deformation_loss: DeformationLossWeights::default(),
            deformation: DeformationConfig::default(),
            encoding: EncodingConfig::default(),
            splat: SplatConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Invalid("steps must be > 0".into()));
        }
        if self.frame_offsets.is_empty() {
            return Err(Error::Invalid("at least one frame offset is required".into()));
        }
        let mut sorted = self.frame_offsets.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.frame_offsets.len() {
            return Err(Error::Invalid("frame offsets must be distinct".into()));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.deformation_loss.validate()?;
        self.deformation.validate()?;
        self.encoding.validate()?;
        self.splat.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub total: f64,
    pub seg: f64,
    pub dep: f64,
    pub distill: f64,
    pub def: f64,
    pub lr: f64,
}

impl LogRecord {
    pub const HEADER: &'static str = "step,loss_total,loss_seg,loss_dep,loss_distill,loss_def,lr";

    fn new(step: u64, r: &LossReport, lr: f64) -> Self {
        LogRecord {
            step,
            total: r.total,
            seg: r.components.seg,
            dep: r.components.dep,
            distill: r.components.distill,
            def: r.components.def,
            lr,
        }
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.total, self.seg, self.dep, self.distill, self.def, self.lr
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    /// `(offset, mIoU)` pairs.
    pub miou: Vec<(i32, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub log: Vec<LogRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Synthetic mIoU of `model` against the scene's ground truth at each offset.
pub fn evaluate_offsets(model: &Model, scene: &SyntheticScene, offsets: &[i32], cfg: &TrainConfig) -> Result<Vec<(i32, f64)>> {
    let tax = ClassTaxonomy::default();
    offsets
        .iter()
        .map(|&t| {
            let pred = model.predict(t, &scene.spec, cfg)?;
            Ok((t, miou(&pred, scene.frame(t)?, &tax)?))
        })
        .collect()
}

/// Trains a freshly initialized model. `on_step` sees every log record as it
/// is produced.
pub fn train(
    scene: &SyntheticScene,
    teacher: Option<&TeacherFeatureStack>,
    cfg: &TrainConfig,
    on_step: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let model = Model::new(cfg, &scene.spec, teacher.map(|t| t.channels))?;
    train_from(model, scene, teacher, cfg, on_step)
}

pub fn train_from(
    mut model: Model,
    scene: &SyntheticScene,
    teacher: Option<&TeacherFeatureStack>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sup = Supervision::from_scene(scene, &cfg.frame_offsets, teacher)?;
    let mut opt = OptimizerState::new(cfg.optimizer, model.num_params());
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut evals = Vec::new();
    // With every loss weight at zero there is nothing to optimize, so the
    // optimizer (and its weight decay) is not run.
    let frozen = cfg.loss.all_zero();
    for step in 0..cfg.steps {
        let (report, grad) = model.loss_and_grad(&sup, cfg, !frozen)?;
        let lr = lr_at(opt.step, &cfg.optimizer);
        if let Some(grad) = grad {
            let mut params = model.flatten();
            let flat = grad.flatten();
            if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(param_name(&model, i)));
            }
            adam_step(&mut params, &flat, &mut opt)?;
            model.assign_flat(&params);
        }
        let rec = LogRecord::new(step, &report, lr);
        log::debug!("{rec}");
        on_step(&rec);
        log.push(rec);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let m = evaluate_offsets(&model, scene, &cfg.eval_offsets, cfg)?;
            log::info!("step {} synthetic mIoU {:?}", step + 1, m);
            evals.push(EvalRecord { step: step + 1, miou: m });
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        log,
        evals,
    })
}

/// Name of the parameter tensor holding flat index `i`.
pub fn param_name<P: Params>(p: &P, i: usize) -> String {
    let mut offset = 0;
    let mut found = format!("flat index {i}");
    p.visit("", &mut |name, _, v| {
        if i >= offset && i < offset + v.len() {
            found = format!("{name}[{}]", i - offset);
        }
        offset += v.len();
    });
    found
}
