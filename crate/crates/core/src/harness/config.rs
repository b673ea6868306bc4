//! Experiment configuration file (TOML).
//!
//! Every section has defaults, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::EvalConfig;
use crate::condspace::{RewardConfig, ToyDataSpec};
use crate::enhancer::EnhancerConfig;
use crate::error::{Error, Result};
use crate::flowmodel::{PretrainConfig, VelocityFieldConfig};
use crate::grpo::AdamWConfig;
use crate::mvgrpo::{DriftConfig, GrpoConfig, SamplingConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Base policy for training; `<output_dir>/pretrained.ckpt` when unset.
    pub pretrained_checkpoint: Option<PathBuf>,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Adds wall-clock time to metrics, which breaks byte-identical reruns.
    pub record_wall_time: bool,
    pub data: ToyDataSpec,
    pub reward: RewardConfig,
    pub model: VelocityFieldConfig,
    pub pretrain: PretrainConfig,
    pub sampling: SamplingConfig,
    pub grpo: GrpoConfig,
    pub optimizer: AdamWConfig,
    pub enhancer: EnhancerConfig,
    pub eval: EvalConfig,
    pub drift: DriftConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            pretrained_checkpoint: None,
            checkpoint_every: 50,
            record_wall_time: false,
            data: ToyDataSpec::default(),
            reward: RewardConfig::default(),
            model: VelocityFieldConfig::default(),
            pretrain: PretrainConfig::default(),
            sampling: SamplingConfig::default(),
            grpo: GrpoConfig::default(),
            optimizer: AdamWConfig::default(),
            enhancer: EnhancerConfig::default(),
            eval: EvalConfig::default(),
            drift: DriftConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::InvalidInput(msg) => Error::config("model", msg),
            other => other,
        })?;
        if self.model.data_dim != self.data.dim() {
            return Err(Error::config(
                "model.data_dim",
                format!("must equal the slot count {}", self.data.dim()),
            ));
        }
        if self.model.cond_dim != self.data.layout.embedding_len() {
            return Err(Error::config(
                "model.cond_dim",
                format!("must equal twice the slot count ({})", self.data.layout.embedding_len()),
            ));
        }
        self.pretrain.validate()?;
        self.eval.validate()?;
        self.drift.validate()?;
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            data: self.data.clone(),
            reward: self.reward.clone(),
            sampling: self.sampling.clone(),
            grpo: self.grpo.clone(),
            optimizer: self.optimizer.clone(),
            enhancer: self.enhancer.clone(),
        }
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.pretrained_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("pretrained.ckpt"))
    }
}
