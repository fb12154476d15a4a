//! TOML run configuration.
//!
//! Relative paths (`out_dir`, `data.path`) are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use mrtl_bench::{ComparisonSetup, TauRanges};
use mrtl_core::data::{generate, load_jsonl, RawDataset};
use mrtl_core::{CriterionConfig, Grid, ResolutionSchedule, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

fn default_val_frac() -> f64 {
    0.2
}

/// Exactly one of `synthetic` and `path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Dyadic refinement of both base grids (or only the primary one when
/// `refine_c` is false). `split_index` defaults to the most full-rank
/// stages whose tensor fits `train.memory_budget`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_b: Grid,
    pub base_c: Grid,
    pub stages: usize,
    #[serde(default = "default_true")]
    pub refine_c: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_index: Option<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// One criterion config per multi-resolution method.
    pub criteria: Vec<CriterionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_max_steps: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub sweep_seed: u64,
    #[serde(default)]
    pub tau_ranges: TauRanges,
}

fn default_workers() -> usize {
    1
}

/// A parsed config together with the directory relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

fn config_err(path: &Path, msg: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("{}: {msg}", path.display()))
}

fn check_grid(name: &str, g: &Grid) -> Result<(), String> {
    Grid::new(g.rows, g.cols, g.cell_size, g.origin).map(|_| ()).map_err(|e| format!("{name}: {e}"))
}

pub fn parse(text: &str) -> Result<RunConfig, String> {
    let de = toml::Deserializer::parse(text).map_err(|e| e.to_string())?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." || path.is_empty() {
            e.inner().message().to_string()
        } else {
            format!("{path}: {}", e.inner().message())
        }
    })
}

impl RunConfig {
    fn validate(&self) -> Result<(), String> {
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(format!("val_frac: must lie in (0, 1), got {}", self.val_frac));
        }
        match (&self.data.synthetic, &self.data.path) {
            (Some(spec), None) => spec.validate().map_err(|e| format!("data.synthetic: {e}"))?,
            (None, Some(_)) => {}
            _ => return Err("data: set exactly one of `synthetic` and `path`".into()),
        }
        check_grid("schedule.base_b", &self.schedule.base_b)?;
        check_grid("schedule.base_c", &self.schedule.base_c)?;
        if self.schedule.stages == 0 {
            return Err("schedule.stages: must be >= 1".into());
        }
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        if let Some(b) = &self.bench {
            if b.workers == 0 {
                return Err("bench.workers: must be >= 1".into());
            }
            for (i, c) in b.criteria.iter().enumerate() {
                c.validate().map_err(|e| format!("bench.criteria[{i}]: {e}"))?;
            }
        }
        Ok(())
    }

    fn n_tasks_hint(&self) -> Option<usize> {
        self.data.synthetic.as_ref().map(|s| s.n_tasks)
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(path, e))?;
        let mut config = parse(&text).map_err(|e| config_err(path, e))?;
        config.validate().map_err(|e| config_err(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        // fill in the budget-derived split when the task count is known
        if config.schedule.split_index.is_none() {
            if let Some(na) = config.n_tasks_hint() {
                let split = Self::budget_split(&config, na).map_err(|e| config_err(path, e))?;
                config.schedule.split_index = Some(split);
            }
        }
        let loaded = Self { config, base_dir };
        if loaded.config.schedule.split_index.is_some() {
            loaded.schedule(0).map_err(|e| config_err(path, format!("schedule: {e}")))?;
        }
        Ok(loaded)
    }

    fn grids(config: &RunConfig) -> Result<(Vec<Grid>, Vec<Grid>), String> {
        let s = &config.schedule;
        let sched = ResolutionSchedule::dyadic_per_mode(s.base_b, s.base_c, s.stages, s.refine_c, 1)
            .map_err(|e| e.to_string())?;
        Ok((sched.grids_b, sched.grids_c))
    }

    fn budget_split(config: &RunConfig, n_tasks: usize) -> Result<usize, String> {
        let (gb, gc) = Self::grids(config)?;
        ResolutionSchedule::split_for_budget(&gb, &gc, n_tasks, config.train.memory_budget).map_err(|e| e.to_string())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out_dir)
    }

    /// The schedule; `n_tasks` only matters when the split comes from the
    /// memory budget.
    pub fn schedule(&self, n_tasks: usize) -> Result<ResolutionSchedule, String> {
        let s = &self.config.schedule;
        let split = match s.split_index {
            Some(k) => k,
            None => Self::budget_split(&self.config, n_tasks)?,
        };
        ResolutionSchedule::dyadic_per_mode(s.base_b, s.base_c, s.stages, s.refine_c, split).map_err(|e| e.to_string())
    }

    /// Loads or generates the whole dataset.
    pub fn dataset(&self) -> mrtl_core::Result<RawDataset> {
        match (&self.config.data.synthetic, &self.config.data.path) {
            (Some(spec), _) => Ok(generate(spec)?.0),
            (None, Some(p)) => load_jsonl(self.resolve(p)),
            (None, None) => unreachable!("validated"),
        }
    }

    /// The resolved config as TOML, split index filled in.
    pub fn echo(&self, n_tasks: usize) -> Result<String, String> {
        let mut c = self.config.clone();
        if c.schedule.split_index.is_none() {
            c.schedule.split_index = Some(Self::budget_split(&c, n_tasks)?);
        }
        toml::to_string(&c).map_err(|e| e.to_string())
    }

    pub fn comparison_setup(&self, n_tasks: usize, threshold: f64) -> Result<ComparisonSetup, Failure> {
        let bench = self
            .config
            .bench
            .as_ref()
            .ok_or_else(|| Failure::Config("bench: section is required for benchmarking".into()))?;
        Ok(ComparisonSetup {
            schedule: self.schedule(n_tasks).map_err(|e| Failure::Config(format!("schedule: {e}")))?,
            train: self.config.train.clone(),
            criteria: bench.criteria.clone(),
            threshold,
            val_frac: self.config.val_frac,
            fixed_max_steps: bench.fixed_max_steps,
            workers: bench.workers,
        })
    }
}
