//! JSON run configuration. Every field has a default; unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentOps, SynthSpec, TileSpec};
use crate::network::ModelConfig;
use crate::objective::LossConfig;
use crate::optim::AdamWConfig;

use super::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimizerConfig {
            lr: 6e-4,
            betas: [a.beta1, a.beta2],
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Train-split metrics are computed every this many epochs (and after
    /// the last one).
    pub eval_every: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 100,
            batch_size: 4,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; the synthetic generator is used when absent.
    pub root: Option<PathBuf>,
    pub synth: SynthSpec,
    pub augment: AugmentOps,
    /// Images larger than `tile.tile` on either side are tiled.
    pub tile: TileSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::tiny(5),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| CliError::Config(m);
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.loss.validate().map_err(|e| cfg(e.to_string()))?;
        self.data.tile.validate().map_err(|e| cfg(e.to_string()))?;
        if self.data.root.is_none() {
            self.data.synth.validate().map_err(|e| cfg(e.to_string()))?;
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(cfg(format!("optimizer.lr must be positive, got {}", o.lr)));
        }
        if !o.betas.iter().all(|b| (0.0..1.0).contains(b))
            || o.eps.is_nan()
            || o.eps <= 0.0
            || o.weight_decay.is_nan()
            || o.weight_decay < 0.0
        {
            return Err(cfg(
                "optimizer betas must lie in [0, 1), eps > 0, weight_decay >= 0".into(),
            ));
        }
        let s = &self.schedule;
        if s.batch_size == 0 || s.epochs == 0 || s.eval_every == 0 {
            return Err(cfg(
                "schedule.epochs, batch_size and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}
