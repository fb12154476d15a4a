//! Benchmarks for multi-resolution training: time-to-threshold comparisons
//! against fixed-resolution training, criterion sensitivity sweeps, and
//! checks of the iteration-count predictions on a controlled quadratic.

pub mod comparison;
pub mod stats;
pub mod sweep;
pub mod theory;
pub mod toy;

use std::path::Path;

use mrtl_core::Result;
use serde::{Deserialize, Serialize};

pub use comparison::{
    oracle_val_loss, run_comparison, ComparisonReport, ComparisonSetup, DataSource, Method, MethodSummary, RunResult,
};
pub use stats::Summary;
pub use sweep::{sensitivity_sweep, SweepResult, TauRange, TauRanges};
pub use theory::{theory_check, theory_sweep, TheoryConfig, TheoryResult};
pub use toy::{gradient_disagreement, ToyConfig, ToyResult};

/// Everything one bench invocation produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub comparison: Option<ComparisonReport>,
    pub sweeps: Vec<SweepResult>,
    pub theory: Vec<TheoryResult>,
}

impl BenchmarkReport {
    /// Writes `report.json`, `curves.csv` (when a comparison ran) and one
    /// `sweep_<kind>.csv` per sweep.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        if let Some(c) = &self.comparison {
            comparison::write_curves_csv(&c.runs, std::fs::File::create(dir.join("curves.csv"))?)?;
        }
        for s in &self.sweeps {
            std::fs::write(dir.join(format!("sweep_{}.csv", s.kind.name())), sweep::sweep_csv(s))?;
        }
        Ok(())
    }
}
