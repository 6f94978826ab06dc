//! Run configuration shared by every CLI subcommand.
//!
//! Every field has a default, so `{}` is a complete configuration. Unknown
//! keys are rejected and parse errors name the offending path.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::{generate_synthetic, load_dataset, Dataset, SyntheticDatasetSpec};
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckConfig;
use crate::model::{DualEncoderModel, EncoderArch, ImageEncoder, DEFAULT_TEMPERATURE};
use crate::training::{pretrain_clean, FitOutcome, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticDatasetSpec),
    File { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::File { path } => load_dataset(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: DataSource,
    pub eval: DataSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = SyntheticDatasetSpec::default();
        Self {
            eval: DataSource::Synthetic(spec.with_seed(1)),
            train: DataSource::Synthetic(spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: EncoderArch,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { arch: EncoderArch::mlp(64, 64, 1, 32), temperature: DEFAULT_TEMPERATURE }
    }
}

/// Clean cross-entropy training that produces the frozen reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 0.05, momentum: 0.9, batch_size: 128 }
    }
}

impl PretrainConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            momentum: self.momentum,
            batch_size: self.batch_size,
            checkpoint_every: 0,
            ..TrainConfig::clean(self.learning_rate, self.epochs, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub attacks: Vec<AttackConfig>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { attacks: vec![AttackConfig::pgd(0.05, 20)], batch_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Seeds model initialization; `--seed` also sets `train.seed`.
    pub seed: u64,
    /// Not part of the digest.
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Used by the `attack` subcommand.
    pub attack: AttackConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            attack: AttackConfig::pgd(0.05, 20),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "at `version`: unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if !(self.model.temperature > 0.0 && self.model.temperature.is_finite()) {
            return Err(Error::Config(format!("at `model.temperature`: must be positive, got {}", self.model.temperature)));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("at `eval.batch_size`: must be >= 1".into()));
        }
        self.train.validate()?;
        self.pretrain.train_config(self.seed).validate()?;
        self.attack.validate()?;
        for a in &self.eval.attacks {
            a.validate()?;
        }
        Ok(())
    }

    /// Initializes the encoder from `seed`, pretrains it on `train` with
    /// clean cross-entropy, and snapshots the result as the frozen reference.
    pub fn reference_model(&self, train: &Dataset) -> Result<(DualEncoderModel, FitOutcome)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let encoder = ImageEncoder::init(&self.model.arch, &mut rng)?;
        let mut model = DualEncoderModel::new(encoder, train.prototypes.clone(), self.model.temperature)?;
        let outcome = pretrain_clean(&mut model, train, &self.pretrain.train_config(self.seed))?;
        model.snapshot_frozen(false)?;
        Ok((model, outcome))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON with `output_dir` cleared.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = RunConfig { output_dir: PathBuf::new(), ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        crate::hex(&Sha256::digest(&bytes))
    }
}

/// Digest of a training config, used to show that ablation arms differ
/// only where intended.
pub fn train_config_digest(cfg: &TrainConfig) -> String {
    use sha2::{Digest, Sha256};
    crate::hex(&Sha256::digest(serde_json::to_vec(cfg).expect("config serializes")))
}
