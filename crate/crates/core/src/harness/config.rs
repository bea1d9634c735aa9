//! Run configuration loaded from JSON and overridden by CLI flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::scenario::ScenarioConfig;
use crate::losses::LossWeights;
use crate::model::{rate_option, ModelConfig};
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup: usize,
    pub adam: AdamConfig,
    /// Search crops per step; their losses are averaged.
    pub search_per_step: usize,
    /// Search-window centre jitter as a fraction of the box scale.
    pub jitter_shift: f32,
    /// Search-window log-scale jitter half-width.
    pub jitter_scale: f32,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            warmup: 100,
            adam: AdamConfig::default(),
            search_per_step: 2,
            jitter_shift: 0.25,
            jitter_scale: 0.2,
            loss: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Fraction of template tokens kept; 1 disables compression.
    pub keep_rate: f64,
    /// Bank admission threshold on the peak classification score.
    pub tau: f32,
    pub seed: u64,
    pub train: TrainConfig,
    pub scenario: ScenarioConfig,
    pub eval_scenarios: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            keep_rate: 0.9,
            tau: 0.7,
            seed: 0,
            train: TrainConfig::default(),
            scenario: ScenarioConfig::default(),
            eval_scenarios: 10,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        rate_option(self.keep_rate)?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::arg("tau", format!("{} not in [0, 1]", self.tau)));
        }
        if self.train.search_per_step == 0 {
            return Err(Error::Config("search_per_step must be positive".into()));
        }
        if !(self.train.adam.lr >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        self.train.loss.validate()?;
        self.scenario.validate()?;
        if self.scenario.frames < 2 {
            return Err(Error::Config("training needs scenarios of at least two frames".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"keep_rate": 0.5, "seed": 7}"#).unwrap();
        assert_eq!((cfg.keep_rate, cfg.seed, cfg.tau), (0.5, 7, 0.7));
    }

    #[test]
    fn bad_values_rejected() {
        let cfg = RunConfig { keep_rate: 1.2, ..RunConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig { tau: -0.1, ..RunConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"kep_rate": 0.5}"#).is_err());
    }
}
