//! Run configuration: JSON file mirroring the CLI's `--config` schema.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotations::SamplingPlan;
use crate::error::{Error, Result};
use crate::metrics::SurfaceDiceConfig;
use crate::postprocess::PostprocessRules;
use crate::ranking::MetricSelector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub bootstrap_samples: usize,
    pub alpha: f64,
    pub significance_metric: MetricSelector,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            bootstrap_samples: 1000,
            alpha: 0.05,
            significance_metric: MetricSelector::TumorDice,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub enabled: bool,
    #[serde(flatten)]
    pub rules: PostprocessRules,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            enabled: false,
            rules: PostprocessRules::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TeamFilter {
    /// When present, only these teams are considered.
    #[serde(default)]
    pub allow: Option<Vec<String>>,
    #[serde(default)]
    pub deny: Vec<String>,
}

impl TeamFilter {
    pub fn admits(&self, team: &str) -> bool {
        if self.deny.iter().any(|t| t == team) {
            return false;
        }
        match &self.allow {
            Some(allow) => allow.iter().any(|t| t == team),
            None => true,
        }
    }
}

/// Prediction-sum heatmap emission. Class names as in the volume header
/// class map; `cases: null` means every discovered case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub classes: Vec<String>,
    #[serde(default)]
    pub cases: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub predictions_root: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sampling: SamplingPlan,
    #[serde(default)]
    pub surface_dice: SurfaceDiceConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub teams: TeamFilter,
    /// 0 means "library default".
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub heatmap: Option<HeatmapConfig>,
    /// How many top-ranked teams feed the canonical strata regression.
    #[serde(default = "default_strata_top_n")]
    pub strata_top_n: usize,
}

fn default_strata_top_n() -> usize {
    5
}

impl RunConfig {
    /// Loads a config file; relative paths are resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("malformed config {}: {e}", path.display()))
        })?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut config.dataset_root,
                &mut config.predictions_root,
                &mut config.output_dir,
            ] {
                if p.is_relative() {
                    *p = dir.join(&p);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset_root.is_dir() {
            return Err(Error::Config(format!(
                "dataset_root {} is not a directory",
                self.dataset_root.display()
            )));
        }
        if !self.predictions_root.is_dir() {
            return Err(Error::Config(format!(
                "predictions_root {} is not a directory",
                self.predictions_root.display()
            )));
        }
        if self.sampling.samples_per_case == 0 {
            return Err(Error::Config("sampling.samples_per_case must be >= 1".to_string()));
        }
        self.surface_dice.validate()?;
        if !(self.stats.alpha > 0.0 && self.stats.alpha < 1.0) {
            return Err(Error::Config(format!(
                "stats.alpha {} must be in (0, 1)",
                self.stats.alpha
            )));
        }
        if self.stats.bootstrap_samples == 0 {
            return Err(Error::Config("stats.bootstrap_samples must be >= 1".to_string()));
        }
        if self.strata_top_n == 0 {
            return Err(Error::Config("strata_top_n must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Effective worker count: CLI override, then config, then the
    /// SEGRANK_WORKERS environment variable. 0 leaves the pool size to
    /// the library.
    pub fn effective_workers(&self, cli_override: Option<usize>) -> usize {
        if let Some(w) = cli_override {
            return w;
        }
        if self.workers > 0 {
            return self.workers;
        }
        std::env::var("SEGRANK_WORKERS")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0)
    }
}
