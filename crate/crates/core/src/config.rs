//! Experiment configuration: TOML by default, JSON behind a flag. Defaults
//! come from the strategy and module definitions and can be printed by the
//! CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::StrategyConfig;
use crate::stream::{ContentKind, Example, ScenarioKind};

/// Environment variable that, when set, becomes the root of all output dirs.
pub const OUT_ROOT_ENV: &str = "CLBENCH_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioCfg,
    pub strategy: StrategyConfig,
    pub output: OutputCfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioCfg {
    pub kind: ScenarioKind,
    pub content: ContentKind,
    pub n_batches: usize,
    /// One full pipeline per seed.
    pub seeds: Vec<u64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub dataset: DatasetCfg,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetCfg {
    Synthetic {
        n_classes: usize,
        dim: usize,
        per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        /// Fixed dataset seed; defaults to the run seed so every seed draws
        /// its own stream.
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        label_column: usize,
    },
}

fn default_spread() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputCfg {
    pub dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: ScenarioCfg {
                kind: ScenarioKind::Sit,
                content: ContentKind::Nc,
                n_batches: 5,
                seeds: vec![0, 1, 2, 3, 4],
                test_fraction: default_test_fraction(),
                dataset: DatasetCfg::Synthetic {
                    n_classes: 10,
                    dim: 16,
                    per_class: 100,
                    spread: default_spread(),
                    seed: None,
                },
            },
            strategy: StrategyConfig::default(),
            output: OutputCfg {
                dir: PathBuf::from("runs/default"),
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file; `json` switches the expected format from TOML.
    pub fn load(path: impl AsRef<Path>, json: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        if json {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    /// The full default configuration rendered as TOML.
    pub fn defaults_toml() -> String {
        toml::to_string_pretty(&ExperimentConfig::default()).expect("defaults serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.kind()?;
        if self.scenario.seeds.is_empty() {
            return Err(Error::config("scenario.seeds: must be non-empty"));
        }
        if self.scenario.n_batches < 1 {
            return Err(Error::config("scenario.n_batches: must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.scenario.test_fraction) {
            return Err(Error::config("scenario.test_fraction: must be in [0, 1)"));
        }
        match &self.scenario.dataset {
            DatasetCfg::Synthetic {
                n_classes,
                dim,
                per_class,
                spread,
                ..
            } => {
                if *n_classes < 2 {
                    return Err(Error::config("scenario.dataset.n_classes: must be >= 2"));
                }
                if *dim < 1 {
                    return Err(Error::config("scenario.dataset.dim: must be >= 1"));
                }
                if *per_class < 1 {
                    return Err(Error::config("scenario.dataset.per_class: must be >= 1"));
                }
                if !spread.is_finite() || *spread < 0.0 {
                    return Err(Error::config("scenario.dataset.spread: must be >= 0"));
                }
            }
            DatasetCfg::Csv { path, .. } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("scenario.dataset.path: must be non-empty"));
                }
            }
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(Error::config("output.dir: must be non-empty"));
        }
        Ok(())
    }

    /// Output directory with the optional environment root applied.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&self.output.dir),
            _ => self.output.dir.clone(),
        }
    }

    /// Materialize the dataset for one run seed.
    pub fn build_dataset(&self, run_seed: u64) -> Result<Vec<Example>> {
        match &self.scenario.dataset {
            DatasetCfg::Synthetic {
                n_classes,
                dim,
                per_class,
                spread,
                seed,
            } => crate::stream::make_synthetic_dataset(
                seed.unwrap_or(run_seed),
                *n_classes,
                *dim,
                *per_class,
                *spread,
            ),
            DatasetCfg::Csv { path, label_column } => {
                crate::stream::load_csv_dataset(path, *label_column)
            }
        }
    }
}
