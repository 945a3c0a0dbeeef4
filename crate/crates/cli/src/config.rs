//! Resolved run configuration: preset, then `--config` file, then flags.

use std::path::{Path, PathBuf};

use reid_core::datagen::PopulationConfig;
use reid_core::novelty::Grid;
use reid_core::pipeline::Experiment;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperScale,
}

/// Open-set evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyConfig {
    /// Fraction of query individuals removed from the gallery; 0 trains on the closed split.
    pub holdout_new: f64,
    /// Share of the open-set queries used to pick the threshold; the rest validate it.
    pub calib_fraction: f64,
    pub grid: Grid,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        Self { holdout_new: 0.0, calib_fraction: 0.5, grid: Grid::default() }
    }
}

/// Input and output locations; `None` means not given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub right_model: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    /// Master seed; data, split and training seeds derive from it unless set in a config file.
    pub seed: u64,
    pub population: PopulationConfig,
    pub experiment: Experiment,
    pub novelty: NoveltyConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let population = match preset {
            Preset::Desk => PopulationConfig::desk(seed),
            Preset::PaperScale => PopulationConfig::paper_scale(seed),
        };
        let mut experiment = Experiment { split_seed: seed, ..Experiment::default() };
        experiment.train.seed = seed;
        Self { preset, seed, population, experiment, novelty: NoveltyConfig::default(), paths: Paths::default() }
    }

    /// Starts from the preset named in the file (or `fallback`) and overlays the
    /// file's fields onto it.
    pub fn from_file(path: &Path, fallback: Preset, seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", path.display())))?;
        let preset = match overlay.get("preset") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| CliError::Usage(format!("config preset: {e}")))?,
            None => fallback,
        };
        let seed = seed.or_else(|| overlay.get("seed").and_then(Value::as_u64)).unwrap_or(0);
        let mut base = serde_json::to_value(Self::preset(preset, seed)).expect("config serializes");
        merge(&mut base, overlay);
        serde_json::from_value(base).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Preset, optionally overlaid by a config file, with `--seed` applied last.
    pub fn resolve(config: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match config {
            Some(p) => Self::from_file(p, preset.unwrap_or(Preset::Desk), seed)?,
            None => Self::preset(preset.unwrap_or(Preset::Desk), seed.unwrap_or(0)),
        };
        if let Some(p) = preset {
            if p != cfg.preset {
                return Err(CliError::Usage(format!("--preset {p:?} conflicts with the config file's preset")));
            }
        }
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }

    /// Gates every randomized step on `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.population.seed = seed;
        self.experiment.split_seed = seed;
        self.experiment.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: reid_core::ReidError| CliError::Usage(e.to_string());
        self.population.validate().map_err(usage)?;
        self.experiment.train.validate().map_err(usage)?;
        self.experiment.augment.validate().map_err(usage)?;
        self.experiment.backbone.validate().map_err(usage)?;
        self.novelty.grid.validate().map_err(usage)?;
        let f = self.experiment.split_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Usage(format!("split fraction must be in (0, 1), got {f}")));
        }
        if !(0.0..1.0).contains(&self.novelty.holdout_new) {
            return Err(CliError::Usage(format!("holdout-new must be in [0, 1), got {}", self.novelty.holdout_new)));
        }
        Ok(())
    }
}

/// Recursive object overlay; non-object values replace.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
