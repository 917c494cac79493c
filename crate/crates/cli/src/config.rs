//! Run configuration file.
//!
//! TOML with the sections below; every key is optional and unknown keys are
//! rejected. Values from the file override built-in defaults, and command-line
//! flags override the file.
//!
//! ```toml
//! [simulator]            # SimulatorConfig: n_users, deferred_purchase_rate, seed, ...
//! [schema]               # fields = [{ name, vocab_size, embed_dim }], oov_policy
//! [model]                # variant, tower_hidden, bottom_hidden, head_hidden, experts, seed, ...
//! [weights]              # ctr, ctcvr, ctcar, ctcar_global, kl
//! [training]             # lr, batch_size, epochs, warmup_steps, seed, shuffle, kl_mode, ...
//! [evaluation]           # boundary, seeds, sweep_parameter, sweep_values, workers
//! [paths]                # out_dir
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use esmc_core::objective::KlMode;
use esmc_core::train::TrainConfig;
use esmc_core::{FeatureSchema, LossWeights, ModelConfig, SimulatorConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub seed: u64,
    pub shuffle: bool,
    pub kl_mode: KlMode,
    pub adagrad_decay: f64,
    pub adagrad_epsilon: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_steps: t.warmup_steps,
            seed: t.seed,
            shuffle: t.shuffle,
            kl_mode: t.kl_mode,
            adagrad_decay: t.adagrad_decay,
            adagrad_epsilon: t.adagrad_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Sessions before this index train, the rest test.
    pub boundary: u32,
    pub seeds: Vec<u64>,
    pub sweep_parameter: String,
    pub sweep_values: Vec<f64>,
    pub workers: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            boundary: 8,
            seeds: vec![0, 1, 2, 3, 4],
            sweep_parameter: "kl".into(),
            sweep_values: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub simulator: SimulatorConfig,
    /// Feature schema of the datasets; derived from `simulator` when absent.
    pub schema: Option<FeatureSchema>,
    pub model: ModelConfig,
    /// Loss weights; the variant's defaults when absent.
    pub weights: Option<LossWeights>,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(UsageError)?;
        toml::from_str(&text)
            .map_err(|e| UsageError(anyhow::anyhow!("{}: {e}", path.display())).into())
    }

    pub fn schema(&self) -> anyhow::Result<FeatureSchema> {
        match &self.schema {
            Some(s) => {
                s.validate()?;
                Ok(s.clone())
            }
            None => Ok(self.simulator.schema()),
        }
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
            .clone()
            .unwrap_or_else(|| LossWeights::for_variant(self.model.variant))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            model: self.model.clone(),
            weights: self.weights(),
            kl_mode: t.kl_mode,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_steps: t.warmup_steps,
            seed: t.seed,
            shuffle: t.shuffle,
            adagrad_decay: t.adagrad_decay,
            adagrad_epsilon: t.adagrad_epsilon,
        }
    }

    /// Writes the fully resolved configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        let mut resolved = self.clone();
        resolved.weights = Some(self.weights());
        resolved.schema = Some(self.schema()?);
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), toml::to_string_pretty(&resolved)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train_config().lr, 0.005);
        assert_eq!(c.train_config().batch_size, 1024);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[training]\nlearning_rate = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[nonsense]\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c: RunConfig = toml::from_str("[model]\nvariant = \"esms2\"\n[simulator]\nn_users = 7\n").unwrap();
        c.weights = Some(c.weights());
        c.schema = Some(c.schema().unwrap());
        let text = toml::to_string_pretty(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
        assert_eq!(c.weights().kl, 0.0);
    }
}
