//! Experiment configuration files.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mtmixatt_core::config::{ModelConfig, TrainConfig};
use mtmixatt_core::data::{generate, Dataset, SyntheticConfig};
use serde::{Deserialize, Serialize};

/// Everything one run needs: model, optimization and data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_samples: 50_000, eval_samples: 5_000, synthetic: SyntheticConfig::desk(0) }
    }
}

pub const PRESETS: [&str; 3] = ["tiny", "desk", "selection"];

impl ExperimentConfig {
    /// Built-in experiments: `tiny` (gradient checks), `desk` (the default
    /// ~10⁵ parameter model) and `selection` (sparse informative features,
    /// used for grouping ablations).
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "desk" => Self::default(),
            "tiny" => {
                let model = ModelConfig::tiny();
                let synthetic = SyntheticConfig { dims: model.features.dims.clone(), scenarios: model.scenarios, blocks: 3, ..SyntheticConfig::desk(0) };
                Self {
                    model,
                    train: TrainConfig { batch_size: 32, steps: 200, eval_every: 50, ..TrainConfig::default() },
                    data: DataConfig { train_samples: 2_000, eval_samples: 500, synthetic },
                }
            }
            "selection" => Self {
                model: ModelConfig::selection(),
                train: TrainConfig { steps: 1000, eval_every: 250, ..TrainConfig::default() },
                data: DataConfig { synthetic: SyntheticConfig::selection(0), ..DataConfig::default() },
            },
            _ => bail!("unknown preset {name:?}; expected one of {PRESETS:?}"),
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let syn = &self.data.synthetic;
        syn.validate()?;
        if syn.dims != self.model.features.dims {
            bail!("data.synthetic.dims {:?} differ from model.features.dims {:?}", syn.dims, self.model.features.dims);
        }
        if syn.scenarios != self.model.scenarios {
            bail!("data.synthetic.scenarios is {} but model.scenarios is {}", syn.scenarios, self.model.scenarios);
        }
        if self.data.train_samples == 0 || self.data.eval_samples == 0 {
            bail!("data.train_samples and data.eval_samples must be at least 1");
        }
        Ok(())
    }

    /// Generate the train and eval sets from one stream, train first.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let total = self.data.train_samples + self.data.eval_samples;
        Ok(generate(&self.data.synthetic, total)?.split(self.data.train_samples)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[train]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.model, ModelConfig::desk());
    }

    #[test]
    fn unknown_keys_and_mismatched_data_fail() {
        assert!(ExperimentConfig::from_toml_str("[train]\nstepz = 7\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[model.moe]\nexpertz = 2\n").is_err());
        assert!(ExperimentConfig::from_toml_str("learning_rate = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[data.synthetic]\nscenarios = 4\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train.optimizer]\nlearning_rate = 0.0\n").is_err());
    }
}
