//! Run configuration: one TOML file with a table per pipeline stage.

use std::fs;
use std::path::Path;

use mrbev::evalharness::EvalConfig;
use mrbev::groundtruth::DatasetConfig;
use mrbev::planner::{PlannerConfig, VehicleFootprint};
use mrbev::predictor::TrainConfig;
use mrbev::synthworld::{TrajectoryConfig, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, PathContext};

pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Leading fraction of samples used for training; the rest validate.
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_fraction: 0.8 }
    }
}

impl SplitConfig {
    pub fn train_count(&self, samples: usize) -> usize {
        ((samples as f64) * self.train_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Side of the short-range smoothing kernel (odd).
    pub smooth_kernel: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { smooth_kernel: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanScenario {
    /// Start pose `[x, y, heading]` in the map frame.
    pub start: [f64; 3],
    /// Goal `[x, y]` in the map frame.
    pub goal: [f64; 2],
}

impl Default for PlanScenario {
    fn default() -> Self {
        PlanScenario {
            start: [0.0, 0.0, 0.0],
            goal: [80.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub trajectory: TrajectoryConfig,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub planner: PlannerConfig,
    pub footprint: VehicleFootprint,
    pub plan: PlanScenario,
}

/// Peak learning rate of the desk-scale training runs. A 200-step budget
/// moves Adam parameters by at most about `steps · lr`, so the rate is ten
/// times the library default.
pub const DESK_PEAK_LR: f64 = 5e-3;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            trajectory: TrajectoryConfig::default(),
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            predictor: PredictorConfig::default(),
            train: TrainConfig {
                peak_lr: DESK_PEAK_LR,
                final_lr: DESK_PEAK_LR / 100.0,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            planner: PlannerConfig::default(),
            footprint: VehicleFootprint::default(),
            plan: PlanScenario::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => Self::parse(&fs::read_to_string(p).at(p)?, p),
        }
    }

    /// Seeds every stochastic stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.world.validate()?;
        self.dataset.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.planner.validate()?;
        self.footprint.validate()?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction <= 1.0) {
            return Err(mrbev::Error::InvalidConfig("split.train_fraction must be in (0, 1]".into()).into());
        }
        if self.predictor.smooth_kernel % 2 == 0 {
            return Err(mrbev::Error::InvalidConfig("predictor.smooth_kernel must be odd".into()).into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the effective configuration into an output directory.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_toml()).at(&path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.world.trees = 7;
        cfg.train.steps = 11;
        let back = RunConfig::parse(&cfg.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::parse("[world]\nseeds = 3\n", Path::new("x")).is_err());
        assert!(RunConfig::parse("bogus = 1\n", Path::new("x")).is_err());
        let partial = RunConfig::parse("[train]\nsteps = 5\n", Path::new("x")).unwrap();
        assert_eq!(partial.train.steps, 5);
        assert_eq!(partial.world, WorldConfig::default());
    }

    #[test]
    fn split_counts() {
        let s = SplitConfig::default();
        assert_eq!((s.train_count(100), 100 - s.train_count(100)), (80, 20));
        assert_eq!(s.train_count(20), 16);
    }

    #[test]
    fn validation_and_exit_code() {
        let mut cfg = RunConfig::default();
        cfg.split.train_fraction = 0.0;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
        assert!(RunConfig::default().validate().is_ok());
    }
}
