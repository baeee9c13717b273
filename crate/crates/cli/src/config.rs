//! TOML experiment files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use transfer_core::data::{load_directory, make_synthetic_transfer_task, SyntheticSpec, TransferSetting};
use transfer_core::nn::{BASE_GROUPS, HEAD_GROUP};
use transfer_core::protocol::{BaselineConfig, PretrainConfig, ProtocolConfig, StageConfig, TrainOptions};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence. Never echoed into reports.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub protocol: ProtocolSection,
}

/// Exactly one of `path` and `synthetic` must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory holding `source/<class>/*.pgm` and `target/<class>/*.pgm`,
    /// relative to the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    pub image_size: usize,
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub source_classes: usize,
    pub target_classes: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Corpus seed; defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    /// Optional restatement of the layer groups, checked against the model.
    #[serde(default)]
    pub groups: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub k: usize,
    pub batch_size: usize,
    pub pretrain: PretrainConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
}

pub fn group_names() -> Vec<String> {
    BASE_GROUPS.iter().chain([&HEAD_GROUP]).map(|s| s.to_string()).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`; a relative dataset path is resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(p) = cfg.dataset.path.as_mut().filter(|p| p.is_relative()) {
            *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) => return Err(CliError::Config("dataset: give either `path` or `synthetic`, not both".into())),
            (None, None) => return Err(CliError::Config("dataset: one of `path` or `synthetic` is required".into())),
            _ => {}
        }
        if let Some(s) = self.synthetic_spec() {
            s.validate()?;
        }
        if let Some(g) = &self.model.groups {
            if *g != group_names() {
                return Err(CliError::Config(format!("model.groups must be {:?}, got {g:?}", group_names())));
            }
        }
        self.protocol_config().validate()?;
        Ok(())
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        self.dataset.synthetic.map(|s| SyntheticSpec {
            seed: s.seed.unwrap_or(self.seed),
            source_classes: s.source_classes,
            target_classes: s.target_classes,
            source_per_class: s.source_per_class,
            target_per_class: s.target_per_class,
            image_size: self.dataset.image_size,
        })
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        let p = &self.protocol;
        ProtocolConfig {
            width: self.model.width,
            k: p.k,
            train: TrainOptions { batch_size: p.batch_size, standardize: self.dataset.standardize, ..TrainOptions::default() },
            pretrain: p.pretrain.clone(),
            stages: p.stages.clone(),
            baseline: p.baseline.clone(),
        }
    }

    pub fn load_data(&self) -> Result<TransferSetting, CliError> {
        if let Some(spec) = self.synthetic_spec() {
            return Ok(make_synthetic_transfer_task(&spec)?);
        }
        let root = self.dataset.path.as_ref().expect("validated");
        let n = self.dataset.image_size;
        let source = load_directory(&root.join("source"), n, n)?;
        let target = load_directory(&root.join("target"), n, n)?;
        Ok(TransferSetting::new(source, target)?)
    }
}
