//! Experiment configuration files.
//!
//! A config names a preset and may override individual keys of the model,
//! training, replay and audit blocks:
//!
//! ```toml
//! preset = "desk"
//! seed = 7
//! base_cities = [0, 1, 2]
//! rounds = [3, 4, 5]
//!
//! [continual_train]
//! epochs = 12
//! ```

use std::path::{Path, PathBuf};

use mobgcl::engine::{ReplayConfig, TrainConfig};
use mobgcl::model::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::registry::Registry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Full-size model and schedules.
    Paper,
    /// CPU-sized model used by the desk experiments.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub top_m: Vec<usize>,
    /// Generation templates drawn from the head of the train split.
    pub templates: usize,
    /// Probe trajectories for the epsilon estimate.
    pub probes: usize,
    pub generations_per_probe: usize,
    pub delta: f64,
    pub temperature: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            top_m: vec![1, 3, 5],
            templates: 200,
            probes: 30,
            generations_per_probe: 16,
            delta: mobgcl::privacy::DEFAULT_DELTA,
            temperature: 1.0,
        }
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data_root: PathBuf,
    pub base_cities: Vec<u32>,
    pub rounds: Vec<u32>,
    pub model: ModelConfig,
    pub base_train: TrainConfig,
    pub continual_train: TrainConfig,
    pub replay: ReplayConfig,
    pub audit: AuditConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Preset,
    #[serde(default)]
    seed: u64,
    data_root: Option<PathBuf>,
    #[serde(default)]
    base_cities: Vec<u32>,
    #[serde(default)]
    rounds: Vec<u32>,
    model: Option<toml::Table>,
    base_train: Option<toml::Table>,
    continual_train: Option<toml::Table>,
    replay: Option<toml::Table>,
    audit: Option<toml::Table>,
}

fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: Option<toml::Table>, block: &str) -> CliResult<T> {
    let Some(patch) = patch else { return Ok(base) };
    let mut table = toml::Table::try_from(&base).map_err(|e| CliError::Config(format!("[{block}]: {e}")))?;
    for (k, v) in patch {
        if !table.contains_key(&k) {
            return Err(CliError::Config(format!("[{block}] has no key `{k}`")));
        }
        table.insert(k, v);
    }
    table.try_into().map_err(|e| CliError::Config(format!("[{block}]: {e}")))
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, seed: u64, data_root: PathBuf) -> Self {
        let (model, base_train, continual_train) = match preset {
            Preset::Paper => (ModelConfig::paper(), TrainConfig::paper_base(), TrainConfig::paper_continual()),
            Preset::Desk => (ModelConfig::desk(), TrainConfig::desk_base(), TrainConfig::desk_continual()),
        };
        let mut cfg = ExperimentConfig {
            preset,
            seed,
            data_root,
            base_cities: vec![0, 1, 2],
            rounds: vec![3, 4, 5],
            model,
            base_train,
            continual_train,
            replay: ReplayConfig::default(),
            audit: AuditConfig::default(),
        };
        cfg.apply_seed();
        cfg
    }

    fn apply_seed(&mut self) {
        self.model.init_seed = self.seed;
        self.base_train.seed = self.seed;
        self.continual_train.seed = self.seed;
        self.replay.seed = self.seed;
    }

    /// Parses a config document. `data_root_override` (the environment
    /// variable) wins over the file's `data_root`.
    pub fn parse(text: &str, data_root_override: Option<PathBuf>) -> CliResult<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let root = data_root_override.or(raw.data_root).unwrap_or_else(|| PathBuf::from("data"));
        let mut cfg = ExperimentConfig::preset(raw.preset, raw.seed, root);
        if !raw.base_cities.is_empty() {
            cfg.base_cities = raw.base_cities;
        }
        if !raw.rounds.is_empty() {
            cfg.rounds = raw.rounds;
        }
        cfg.model = overlay(cfg.model, raw.model, "model")?;
        cfg.base_train = overlay(cfg.base_train, raw.base_train, "base_train")?;
        cfg.continual_train = overlay(cfg.continual_train, raw.continual_train, "continual_train")?;
        cfg.replay = overlay(cfg.replay, raw.replay, "replay")?;
        cfg.audit = overlay(cfg.audit, raw.audit, "audit")?;
        cfg.apply_seed();
        cfg.model.validate()?;
        cfg.base_train.validate()?;
        cfg.continual_train.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and checks that every referenced city is present
    /// under the data root. A relative `data_root` in the file resolves
    /// against the file's directory.
    pub fn load(path: &Path, data_root_override: Option<PathBuf>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let from_env = data_root_override.is_some();
        let mut cfg = Self::parse(&text, data_root_override)?;
        if !from_env && cfg.data_root.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data_root = dir.join(&cfg.data_root);
            }
        }
        let registry = Registry::new(&cfg.data_root);
        for &id in cfg.base_cities.iter().chain(&cfg.rounds) {
            registry.require(id)?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [Preset::Paper, Preset::Desk] {
            let cfg = ExperimentConfig::preset(p, 3, PathBuf::from("data"));
            let back = ExperimentConfig::parse(&cfg.to_toml(), None).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn paper_preset_values() {
        let c = ExperimentConfig::preset(Preset::Paper, 0, PathBuf::from("d"));
        assert_eq!(c.model.n_layers, 6);
        assert_eq!(c.model.initial_experts, 4);
        assert_eq!(c.continual_train.batch_size, 128);
        assert_eq!(c.continual_train.lr, 1.2e-4);
        assert_eq!(c.base_train.epochs, 30);
        assert_eq!(c.replay.alpha, 0.2);
    }

    #[test]
    fn partial_overrides_and_seed() {
        let c = ExperimentConfig::parse("preset = \"desk\"\nseed = 9\n[continual_train]\nepochs = 12\n", None).unwrap();
        assert_eq!(c.continual_train.epochs, 12);
        assert_eq!(c.continual_train.lr, TrainConfig::desk_continual().lr);
        assert_eq!((c.model.init_seed, c.replay.seed, c.base_train.seed), (9, 9, 9));
        assert!(ExperimentConfig::parse("preset = \"desk\"\n[model]\nwidth = 3\n", None).is_err());
        assert!(ExperimentConfig::parse("preset = \"huge\"\n", None).is_err());
    }

    #[test]
    fn env_root_wins() {
        let c = ExperimentConfig::parse("preset = \"desk\"\ndata_root = \"a\"\n", Some(PathBuf::from("b"))).unwrap();
        assert_eq!(c.data_root, PathBuf::from("b"));
    }
}
