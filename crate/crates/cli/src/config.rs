use std::path::{Path, PathBuf};

use dego::deformation::{DeformationConfig, DeformationLossWeights};
use dego::encoding::EncodingConfig;
use dego::metrics::DEFAULT_RAY_THRESHOLDS;
use dego::objective::{LossWeights, ModelConfig, OptimizerConfig, TrainConfig, DEFAULT_FRAME_OFFSETS};
use dego::rendering::RenderConfig;
use dego::splatting::SplatConfig;
use dego::taxonomy::{ClassTaxonomy, NUM_CLASSES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub frame_offsets: Vec<i32>,
    pub eval_every: u64,
    pub eval_offsets: Vec<i32>,
    /// Log a loss line every this many steps.
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            frame_offsets: DEFAULT_FRAME_OFFSETS.to_vec(),
            eval_every: 0,
            eval_offsets: vec![0],
            log_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    None,
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub mode: TeacherMode,
    /// Feature file for `mode = "file"`.
    pub path: Option<PathBuf>,
    pub patch_size: usize,
    /// Width of each channel half of the synthetic teacher.
    pub channels: usize,
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            mode: TeacherMode::Synthetic,
            path: None,
            patch_size: 8,
            channels: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Score only voxels visible from some camera.
    pub visible_only: bool,
    pub rayiou: bool,
    pub ray_thresholds: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            visible_only: false,
            rayiou: false,
            ray_thresholds: DEFAULT_RAY_THRESHOLDS.to_vec(),
        }
    }
}

/// Everything `dego train` reads, as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Scene directory written by `dego gen-scene`.
    pub scene: PathBuf,
    pub out: PathBuf,
    /// Class taxonomy file; the built-in 15-class taxonomy when absent.
    pub taxonomy: Option<PathBuf>,
    pub train: TrainSection,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub deformation_loss: DeformationLossWeights,
    pub deformation: DeformationConfig,
    pub encoding: EncodingConfig,
    pub splat: SplatConfig,
    pub render: RenderConfig,
    pub teacher: TeacherSection,
    pub eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            scene: PathBuf::from("scene"),
            out: PathBuf::from("out"),
            taxonomy: None,
            train: TrainSection::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            deformation_loss: DeformationLossWeights::default(),
            deformation: DeformationConfig::default(),
            encoding: EncodingConfig::default(),
            splat: SplatConfig::default(),
            render: RenderConfig::default(),
            teacher: TeacherSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Config {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            steps: self.train.steps,
            frame_offsets: self.train.frame_offsets.clone(),
            eval_every: self.train.eval_every,
            eval_offsets: self.train.eval_offsets.clone(),
            model: self.model,
            optimizer: self.optimizer,
            loss: self.loss,
            deformation_loss: self.deformation_loss,
            deformation: self.deformation,
            encoding: self.encoding,
            splat: self.splat,
            render: self.render,
        }
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a JSON config; absent keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<Config, CliError> {
    parse_json(text)
}

/// Deserializes `text`, naming the offending key path on failure.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        match msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
            Some(key) => CliError::UnknownKey {
                key: join_path(&path, key),
            },
            None => CliError::TypeError { path, message: msg },
        }
    })
}

fn join_path(path: &str, key: &str) -> String {
    // the reported path already ends at the unknown key
    if path == key || path.ends_with(&format!(".{key}")) {
        path.to_string()
    } else if path == "." || path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

pub fn parse_config(path: &Path) -> Result<Config, CliError> {
    parse_config_str(&read_text(path, "config")?)
}

pub(crate) fn read_text(path: &Path, kind: &'static str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingFile {
            path: path.to_path_buf(),
            kind,
        },
        _ => CliError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

/// Class names and group memberships, as stored in a taxonomy file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyFile {
    pub names: Vec<String>,
    pub human: Vec<usize>,
    pub instance: Vec<usize>,
    pub scene: Vec<usize>,
}

/// The default taxonomy, or the one at `path`. The model always predicts
/// the fixed class set, so a file must keep its size.
pub fn load_taxonomy(path: Option<&Path>) -> Result<ClassTaxonomy, CliError> {
    let Some(path) = path else {
        return Ok(ClassTaxonomy::default());
    };
    let t: TaxonomyFile = parse_json(&read_text(path, "taxonomy")?)?;
    if t.names.len() != NUM_CLASSES {
        return Err(CliError::TypeError {
            path: "names".into(),
            message: format!("{} classes, expected {NUM_CLASSES}", t.names.len()),
        });
    }
    if let Some(&c) = t.human.iter().chain(&t.instance).chain(&t.scene).find(|&&c| c >= NUM_CLASSES) {
        return Err(CliError::TypeError {
            path: "groups".into(),
            message: format!("class index {c} out of range"),
        });
    }
    Ok(ClassTaxonomy {
        names: t.names,
        human: t.human,
        instance: t.instance,
        scene: t.scene,
    })
}
