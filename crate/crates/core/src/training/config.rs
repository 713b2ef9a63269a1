use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{SegmenterConfig, TranslatorConfig, BOTTLENECK};
use crate::synth::{DatasetSpec, StainProfile};
use crate::variants::VariantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Constant for the first half of the budget, then linear decay toward zero.
    ConstantThenLinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: String,
    pub variant_params: VariantParams,
    pub weights: LossWeights,
    pub translator: TranslatorConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_schedule: LrSchedule,
    pub seeds: Vec<u64>,
    pub replay_buffer_size: usize,
    pub dsm_layer: String,
    pub reference_bank_size: usize,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: "baseline".into(),
            variant_params: VariantParams::default(),
            weights: LossWeights::default(),
            translator: TranslatorConfig::default(),
            steps: 3000,
            batch_size: 8,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lr_schedule: LrSchedule::ConstantThenLinearDecay,
            seeds: vec![1, 2, 3],
            replay_buffer_size: 50,
            dsm_layer: BOTTLENECK.into(),
            reference_bank_size: 256,
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.translator.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::ConstantThenLinearDecay => {
                let start = self.steps / 2;
                if step < start {
                    self.lr
                } else {
                    let span = (self.steps - start + 1) as f64;
                    self.lr * (1.0 - (step - start + 1) as f64 / span)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub segmenter: SegmenterConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Evaluations without improvement before stopping early.
    pub patience: u64,
    pub min_val_dice: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            segmenter: SegmenterConfig::default(),
            steps: 1500,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            eval_every: 100,
            patience: 4,
            min_val_dice: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    /// Variants to train; seeds come from `run.seeds`.
    pub variants: Vec<String>,
    pub probe_sigma: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            variants: vec!["baseline".into(), "dsa".into()],
            probe_sigma: 0.05,
        }
    }
}

/// Everything a workflow needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source_profile: StainProfile,
    pub data: DatasetSpec,
    pub segmenter_training: SegTrainConfig,
    pub run: RunConfig,
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source_profile: StainProfile::Rich,
            data: DatasetSpec::default(),
            segmenter_training: SegTrainConfig::default(),
            run: RunConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::artifact(path, e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.segmenter_training.segmenter.validate()?;
        self.run.validate()?;
        if self.protocol.variants.is_empty() {
            return Err(Error::Config("protocol needs at least one variant".into()));
        }
        if !(self.protocol.probe_sigma >= 0.0) {
            return Err(Error::Config("probe_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_keeps_every_field() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fall_back_to_defaults() {
        let cfg = ExperimentConfig::from_toml("[run]\nvariant = \"dsa\"\nsteps = 10\n").unwrap();
        assert_eq!(cfg.run.variant, "dsa");
        assert_eq!(cfg.run.steps, 10);
        assert_eq!(cfg.run.weights.w_cyc, 10.0);
        assert_eq!(cfg.run.weights.sigma, 0.0125);
        assert_eq!(cfg.run.replay_buffer_size, 50);
    }

    #[test]
    fn empty_seed_list_is_invalid() {
        assert!(ExperimentConfig::from_toml("[run]\nseeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml("[run]\nbogus_key = 1\n").is_ok());
    }

    #[test]
    fn schedule_is_constant_then_decays() {
        let cfg = RunConfig {
            steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 2e-4);
        assert_eq!(cfg.lr_at(49), 2e-4);
        assert!(cfg.lr_at(50) < 2e-4);
        assert!(cfg.lr_at(99) > 0.0);
        assert!(cfg.lr_at(99) < cfg.lr_at(75));
    }
}
