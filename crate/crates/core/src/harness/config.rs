//! Declarative run configuration.
//!
//! A run is described by one TOML file. Unknown keys are rejected. Two
//! environment variables override it: `EKG_RUN_DIR` (run directory) and
//! `EKG_DEVICE` (compute device; only `cpu` exists).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_cifar10, synthetic, Dataset, SplitSpec, SyntheticSpec};
use crate::error::{Error, IoContext, Result};
use crate::finetune::FinetuneConfig;
use crate::landscape::TraversalConfig;
use crate::netcore::zoo::{resnet_cifar, toy_cnn, ToyLayer};
use crate::netcore::Architecture;
use crate::optim::LrSchedule;
use crate::search::SearchConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    /// CIFAR-10 binary release directory.
    Cifar10 { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSpec {
    /// `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Synthetic(spec) => synthetic(spec),
            DatasetSpec::Cifar10 { path } => load_cifar10(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Toy { layers: Vec<ToyLayer> },
    Resnet { depth: usize },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Toy { layers: vec![ToyLayer::new(16), ToyLayer::new(32).stride(2), ToyLayer::new(32)] }
    }
}

impl ModelSpec {
    pub fn architecture(&self, input: [usize; 3], classes: usize) -> Result<Architecture> {
        match self {
            ModelSpec::Toy { layers } => toy_cnn(input, layers, classes),
            ModelSpec::Resnet { depth } => resnet_cifar(*depth, classes, input),
        }
    }
}

/// Training from scratch when no pretrained checkpoint is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Horizontal flips and padded random crops.
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            checkpoint: None,
            epochs: 200,
            batch_size: 128,
            lr: LrSchedule { initial: 0.1, decay: 0.2, milestones: vec![60, 120, 160] },
            weight_decay: 5e-4,
            momentum: 0.9,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MembankConfig {
    /// Number of teachers.
    pub k: usize,
    pub batch_size: usize,
}

impl Default for MembankConfig {
    fn default() -> Self {
        MembankConfig { k: 5, batch_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub traversal: TraversalConfig,
    pub grid_resolution: usize,
    pub grid_extent: f64,
    /// Validation batches entering the Hessian estimates.
    pub hessian_batches: usize,
    pub batch_size: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            traversal: TraversalConfig::default(),
            grid_resolution: 5,
            grid_extent: 1.0,
            hessian_batches: 1,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Label in report tables.
    pub method: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub device: String,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub pretrain: PretrainConfig,
    pub splits: SplitSpec,
    pub search: SearchConfig,
    pub membank: MembankConfig,
    pub finetune: FinetuneConfig,
    pub landscape: LandscapeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: "ekg".into(),
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            device: "cpu".into(),
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            pretrain: PretrainConfig::default(),
            splits: SplitSpec::default(),
            search: SearchConfig::default(),
            membank: MembankConfig::default(),
            finetune: FinetuneConfig::default(),
            landscape: LandscapeConfig::default(),
        }
    }
}

pub const ENV_RUN_DIR: &str = "EKG_RUN_DIR";
pub const ENV_DEVICE: &str = "EKG_DEVICE";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a file and apply environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(d) = get(ENV_RUN_DIR) {
            self.run_dir = PathBuf::from(d);
        }
        if let Some(d) = get(ENV_DEVICE) {
            self.device = d;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("device `{}` is not available; only `cpu` is supported", self.device)));
        }
        self.search.validate()?;
        self.finetune.validate()?;
        if self.membank.k == 0 || self.membank.batch_size == 0 {
            return Err(Error::Config("membank needs k >= 1 and a positive batch size".into()));
        }
        if self.pretrain.checkpoint.is_none() && self.pretrain.epochs > 0 {
            self.pretrain.lr.validate(self.pretrain.epochs)?;
        }
        if self.pretrain.batch_size == 0 || self.landscape.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that influences results (not the run directory or device).
    pub fn hash(&self) -> String {
        hash_json(&(
            &self.method,
            self.seed,
            &self.dataset,
            &self.model,
            &self.pretrain,
            &self.splits,
            &self.search,
            &self.membank,
            &self.finetune,
            &self.landscape,
        ))
    }
}

pub(crate) fn hash_json(v: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}
