//! Experiment configuration: one TOML file drives every subcommand.
//!
//! A single top-level `seed` feeds every random stream (network init, data
//! synthesis, splits, batches, classifier training), so changing it changes
//! everything and keeping it reproduces everything.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{load_image_folder, make_toy_dataset, AugmentPolicy, LabeledDataset, LoadReport, ToySpec};
use crate::evaluation::{ClassifierConfig, StubKind, SweepSettings};
use crate::networks::{NetworkSpec, DEFAULT_BASE_CHANNELS, DEFAULT_LATENT_DIM, DEFAULT_MIN_CHANNELS};
use crate::train::TrainConfig;

/// Overrides `[data] root` for folder datasets.
pub const DATA_ROOT_ENV: &str = "APGAN_DATA_ROOT";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub min_channels: usize,
    /// Resolutions carrying an attention block.
    pub attention: Vec<u32>,
    pub attention_in_generator: bool,
    pub attention_in_discriminator: bool,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        NetworkSettings {
            latent_dim: DEFAULT_LATENT_DIM,
            base_channels: DEFAULT_BASE_CHANNELS,
            min_channels: DEFAULT_MIN_CHANNELS,
            attention: vec![16],
            attention_in_generator: true,
            attention_in_discriminator: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Toy,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub source: DataSource,
    /// Root of a `class/image` folder tree; `APGAN_DATA_ROOT` wins if set.
    pub root: Option<PathBuf>,
    pub val_per_class: usize,
    pub held_out_per_class: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            source: DataSource::Toy,
            root: None,
            val_per_class: 20,
            held_out_per_class: 0,
        }
    }
}

/// Toy corpus: the reference class counts divided by `divisor`, rendered at
/// the final training resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySettings {
    pub divisor: usize,
    pub noise: f64,
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            divisor: 10,
            noise: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub bank_per_class: usize,
    /// Also train the real classifier on the bank's per-class budget.
    pub equal_budget: bool,
    /// Evaluate a harness stub instead of a generator checkpoint.
    pub stub: Option<StubKind>,
    pub grid_columns: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            bank_per_class: 100,
            equal_budget: true,
            stub: None,
            grid_columns: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentExperimentSettings {
    pub n_real_per_class: usize,
    pub n_synth_per_class: usize,
    /// Standard augmentation for the comparison arm.
    pub policy: AugmentPolicy,
}

impl Default for AugmentExperimentSettings {
    fn default() -> Self {
        AugmentExperimentSettings {
            n_real_per_class: 20,
            n_synth_per_class: 100,
            policy: AugmentPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub network: NetworkSettings,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub toy: ToySettings,
    /// Online augmentation of GAN training batches; off when absent.
    pub gan_augment: Option<AugmentPolicy>,
    pub classifier: ClassifierConfig,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
    pub augment_experiment: AugmentExperimentSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            network: NetworkSettings::default(),
            train: TrainConfig::default(),
            data: DataSettings::default(),
            toy: ToySettings::default(),
            gan_augment: None,
            classifier: ClassifierConfig {
                epochs: 20,
                lr: 0.01,
                batch_size: 32,
                input_resolution: 16,
                ..ClassifierConfig::default()
            },
            eval: EvalSettings::default(),
            sweep: SweepSettings::default(),
            augment_experiment: AugmentExperimentSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML and pushes the top-level seed into every component.
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.classifier.seed = seed;
        self
    }

    /// Every problem in the file, not just the first.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let mut bad = Vec::new();
        if let Err(e) = self.train.validate() {
            bad.extend(e.problems.iter().map(|p| format!("train.{}: {}", p.field, p.reason)));
        }
        if let Err(e) = self.classifier.validate() {
            bad.push(format!("classifier: {e}"));
        }
        if let Err(e) = self.sweep.validate(self.train.final_resolution) {
            bad.push(format!("sweep: {e}"));
        }
        for &r in &self.network.attention {
            if !self.train.resolutions().contains(&r) {
                bad.push(format!(
                    "network.attention: {r} is not a stage resolution of {:?}",
                    self.train.resolutions()
                ));
            }
        }
        if self.network.latent_dim == 0 || self.network.base_channels == 0 || self.network.min_channels == 0 {
            bad.push("network: latent_dim, base_channels and min_channels must be >= 1".into());
        }
        if let Some(p) = &self.gan_augment {
            if let Err(e) = p.validate() {
                bad.push(format!("gan_augment: {e}"));
            }
        }
        if let Err(e) = self.augment_experiment.policy.validate() {
            bad.push(format!("augment_experiment.policy: {e}"));
        }
        if self.augment_experiment.n_real_per_class == 0 {
            bad.push("augment_experiment.n_real_per_class must be >= 1".into());
        }
        if self.data.val_per_class == 0 {
            bad.push("data.val_per_class must be >= 1".into());
        }
        if self.eval.bank_per_class < 10 {
            bad.push("eval.bank_per_class must be >= 10".into());
        }
        if self.eval.grid_columns == 0 {
            bad.push("eval.grid_columns must be >= 1".into());
        }
        if self.data.source == DataSource::Toy {
            if let Err(e) = self.toy_spec().validate() {
                bad.push(format!("toy: {e}"));
            }
            if self.toy.divisor == 0 {
                bad.push("toy.divisor must be >= 1".into());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ExperimentError::Invalid(bad))
        }
    }

    pub fn toy_spec(&self) -> ToySpec {
        let mut t = ToySpec::scaled(self.toy.divisor, self.train.final_resolution as usize, self.seed);
        t.noise = self.toy.noise;
        t
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).or_else(|| self.data.root.clone())
    }

    /// The full labelled dataset at the final training resolution.
    pub fn load_dataset(&self) -> Result<(LabeledDataset, Option<LoadReport>), ExperimentError> {
        match self.data.source {
            DataSource::Toy => Ok((make_toy_dataset(&self.toy_spec())?, None)),
            DataSource::Folder => {
                let root = self.data_root().ok_or_else(|| {
                    ExperimentError::Invalid(vec![format!("data.root is not set and {DATA_ROOT_ENV} is empty")])
                })?;
                let (ds, report) = load_image_folder(&root, Some(self.train.final_resolution as usize))?;
                Ok((ds, Some(report)))
            }
        }
    }

    /// Class names without decoding any image: toy style names, or the sorted
    /// subdirectory names of the data root.
    pub fn class_names(&self) -> Result<Vec<String>, ExperimentError> {
        match self.data.source {
            DataSource::Toy => {
                let t = self.toy_spec();
                Ok(t.classes.iter().take(t.n_classes).map(|c| c.name.clone()).collect())
            }
            DataSource::Folder => {
                let root = self.data_root().ok_or_else(|| {
                    ExperimentError::Invalid(vec![format!("data.root is not set and {DATA_ROOT_ENV} is empty")])
                })?;
                let rd = std::fs::read_dir(&root).map_err(|e| ExperimentError::Read {
                    path: root.clone(),
                    reason: e.to_string(),
                })?;
                let mut names: Vec<String> = rd
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().is_dir())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .collect();
                names.sort();
                Ok(names)
            }
        }
    }

    /// Network for `n_classes` with the configured attention placement.
    pub fn network_spec(&self, n_classes: usize) -> Result<NetworkSpec, crate::networks::NetworkError> {
        self.base_network_spec(n_classes)?.with_attention(&self.network.attention)
    }

    /// Network without attention; the placement sweep adds it per arm.
    pub fn base_network_spec(&self, n_classes: usize) -> Result<NetworkSpec, crate::networks::NetworkError> {
        let mut spec = NetworkSpec::with_channels(
            self.train.final_resolution,
            self.network.latent_dim,
            n_classes,
            self.network.base_channels,
            self.network.min_channels,
        )?;
        spec.attention_in_generator = self.network.attention_in_generator;
        spec.attention_in_discriminator = self.network.attention_in_discriminator;
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn seed_reaches_every_component() {
        let c = ExperimentConfig::from_toml_str("seed = 7\n[train]\nseed = 1\n").unwrap();
        assert_eq!((c.train.seed, c.classifier.seed, c.toy_spec().seed), (7, 7, 7));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_reported() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("[train]\nlr_gg = 1.0\n"),
            Err(ExperimentError::Parse(_))
        ));
        let c = ExperimentConfig::from_toml_str("[train]\nlr_g = -1.0\nd_g_step_ratio = 0\n[network]\nattention = [64]\n").unwrap();
        let ExperimentError::Invalid(problems) = c.validate().unwrap_err() else {
            panic!("expected validation errors")
        };
        assert_eq!(problems.len(), 3, "{problems:?}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), a.clone().with_seed(1).hash());
    }
}
