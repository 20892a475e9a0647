//! Declarative experiment configuration.

use std::path::{Path, PathBuf};

use crowdda::data::{FilterRule, GapConfig, ToyLayout, MIN_TOY_SIZE};
use crowdda::losses::LossWeights;
use crowdda::networks::{CounterConfig, FeatureDiscConfig, MapDiscConfig, RefinerConfig};
use crowdda::training::{ModelConfig, TrainConfig};
use crowdda::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Procedural dataset written by `gen-toy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub out: PathBuf,
    /// Training images per domain.
    pub n: usize,
    /// Held-out labelled images per domain.
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub gap: GapConfig,
    pub layout: ToyLayout,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("toy"),
            n: 120,
            n_test: 40,
            height: 64,
            width: 64,
            gap: GapConfig::standard(),
            layout: ToyLayout::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Labelled source training set.
    pub source: PathBuf,
    /// Target training images; their annotations are never read.
    pub target: PathBuf,
    /// Labelled source test set, used to train the map refiner.
    pub source_test: PathBuf,
    /// Labelled target test set, used for evaluation only.
    pub target_test: PathBuf,
    /// Gaussian kernel sigma of the ground-truth densities, in pixels.
    pub sigma: f64,
    /// Named scene rule applied to the source set (`shtb`, `worldexpo`,
    /// `mall`, `ucsd`).
    pub filter_preset: Option<String>,
    /// Explicit scene rule; takes precedence over `filter_preset`.
    pub filter: Option<FilterRule>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let toy = PathBuf::from("toy");
        Self {
            source: toy.join("source"),
            target: toy.join("target"),
            source_test: toy.join("source_test"),
            target_test: toy.join("target_test"),
            sigma: 8.0,
            filter_preset: None,
            filter: None,
        }
    }
}

impl DataConfig {
    pub fn filter_rule(&self) -> Result<Option<FilterRule>> {
        if let Some(rule) = &self.filter {
            rule.validate()?;
            return Ok(Some(rule.clone()));
        }
        match &self.filter_preset {
            None => Ok(None),
            Some(name) => FilterRule::named(name)
                .map(Some)
                .ok_or_else(|| Error::Config(format!("unknown scene filter preset {name:?}"))),
        }
    }
}

/// Checkpoints consumed by the refine and evaluate commands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub counter: Option<PathBuf>,
    pub refiner: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root under which experiment directories are created.
    pub out: PathBuf,
    /// Seeds data generation and training; overrides `train.seed`.
    pub seed: u64,
    pub toy: ToyConfig,
    pub data: DataConfig,
    pub models: ModelConfig,
    pub train: TrainConfig,
    pub checkpoints: CheckpointPaths,
}

impl Default for ExperimentConfig {
    /// The desk-scale toy recipe.
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            seed: 0,
            toy: ToyConfig::default(),
            data: DataConfig::default(),
            models: ModelConfig {
                counter: CounterConfig::small(6),
                feature_disc: FeatureDiscConfig { widths: vec![16, 16, 16, 2] },
                map_disc: MapDiscConfig { widths: vec![8, 16, 16] },
                refiner: RefinerConfig { widths: [4, 8, 8], ..RefinerConfig::default() },
            },
            train: TrainConfig {
                lr_g: 1e-3,
                lr_d: 1e-3,
                lr_r: 1e-3,
                weights: LossWeights::default(),
                max_steps: 1000,
                eval_every: 50,
                patience: 100,
                refiner_max_steps: 300,
                refiner_eval_every: 25,
                ..TrainConfig::default()
            },
            checkpoints: CheckpointPaths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a config file, layering it key by key over the defaults so a
    /// partial table keeps the default values of the keys it omits.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serialises");
        merge(&mut merged, user);
        merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Make derived fields consistent and check everything that can be
    /// checked without touching the file system.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.validate()?;
        self.models.counter.validate()?;
        self.data.filter_rule()?;
        if !(self.data.sigma > 0.0 && self.data.sigma.is_finite()) {
            return Err(Error::Config(format!("data.sigma must be positive, got {}", self.data.sigma)));
        }
        let toy = &self.toy;
        if toy.n == 0 || toy.n_test == 0 {
            return Err(Error::Config("toy.n and toy.n_test must be at least 1".into()));
        }
        if toy.height < MIN_TOY_SIZE || toy.width < MIN_TOY_SIZE {
            return Err(Error::Config(format!("toy images must be at least {MIN_TOY_SIZE}x{MIN_TOY_SIZE}")));
        }
        Ok(self)
    }

    /// First 8 hex digits of the SHA-256 of the serialised config.
    pub fn hash(&self) -> String {
        self.hash_with("")
    }

    /// Like [`ExperimentConfig::hash`], also covering `extra` (command
    /// arguments that are not part of the config).
    pub fn hash_with(&self, extra: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        h.update(extra.as_bytes());
        h.finalize()[..4].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
