//! Time-to-threshold comparison of fixed-resolution training against the
//! multi-resolution variants.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use mrtl_core::data::{encode_at, generate, RawDataset, SyntheticSpec};
use mrtl_core::model::SpatialModel;
use mrtl_core::mrtl::random_factored;
use mrtl_core::{
    mrtl_train, train_fixed, Control, CriterionConfig, CriterionKind, Error, EvalEvent, ResolutionSchedule, Result,
    RunOptions, TrainConfig, TrainReport,
};
use serde::{Deserialize, Serialize};

use crate::stats::Summary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FixedResolution,
    MrtlLossConv,
    MrtlEntropy,
    MrtlSigma,
    MrtlMuSigma,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::FixedResolution, Method::MrtlLossConv, Method::MrtlEntropy, Method::MrtlSigma, Method::MrtlMuSigma];

    pub fn name(self) -> &'static str {
        match self {
            Method::FixedResolution => "fixed_resolution",
            Method::MrtlLossConv => "mrtl_loss_conv",
            Method::MrtlEntropy => "mrtl_entropy",
            Method::MrtlSigma => "mrtl_sigma",
            Method::MrtlMuSigma => "mrtl_mu_sigma",
        }
    }

    /// The transition criterion a multi-resolution method uses.
    pub fn criterion_kind(self) -> Option<CriterionKind> {
        match self {
            Method::FixedResolution => None,
            Method::MrtlLossConv => Some(CriterionKind::LossConvergence),
            Method::MrtlEntropy => Some(CriterionKind::EntropyThreshold),
            Method::MrtlSigma => Some(CriterionKind::SigmaThreshold),
            Method::MrtlMuSigma => Some(CriterionKind::MuSigmaThreshold),
        }
    }

    pub fn valid_names() -> String {
        Method::ALL.map(Method::name).join(", ")
    }

    /// Parses a comma-separated list, accepting short aliases.
    pub fn parse_list(s: &str) -> std::result::Result<Vec<Method>, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Method = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(format!("no methods given; valid methods: {}", Method::valid_names()));
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "fixed_resolution" | "fixed" => Method::FixedResolution,
            "mrtl_loss_conv" | "loss_conv" | "loss_convergence" => Method::MrtlLossConv,
            "mrtl_entropy" | "entropy" | "entropy_threshold" => Method::MrtlEntropy,
            "mrtl_sigma" | "sigma" | "sigma_threshold" => Method::MrtlSigma,
            "mrtl_mu_sigma" | "mu_sigma" | "mu_sigma_threshold" => Method::MrtlMuSigma,
            other => return Err(format!("unknown method {other:?}; valid methods: {}", Method::valid_names())),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Dataset(RawDataset),
}

impl DataSource {
    pub fn materialize(&self) -> Result<RawDataset> {
        match self {
            DataSource::Synthetic(spec) => Ok(generate(spec)?.0),
            DataSource::Dataset(ds) => Ok(ds.clone()),
        }
    }
}

/// Everything shared by the compared runs.
#[derive(Debug, Clone)]
pub struct ComparisonSetup {
    pub schedule: ResolutionSchedule,
    /// Base training config; each multi-resolution method swaps in its own
    /// criterion, and every run uses its seed.
    pub train: TrainConfig,
    /// Criterion configs, looked up by kind.
    pub criteria: Vec<CriterionConfig>,
    /// Validation loss that counts as reached.
    pub threshold: f64,
    pub val_frac: f64,
    /// Step cap of the fixed-resolution baseline; defaults to the step cap
    /// per stage times the number of training segments.
    pub fixed_max_steps: Option<usize>,
    /// Runs executed concurrently.
    pub workers: usize,
}

impl ComparisonSetup {
    pub fn criterion(&self, kind: CriterionKind) -> Result<&CriterionConfig> {
        self.criteria
            .iter()
            .find(|c| c.kind == kind)
            .ok_or_else(|| Error::InvalidConfig(format!("no criterion config for {}", kind.name())))
    }

    /// Training segments of one multi-resolution run.
    pub fn segment_count(&self) -> usize {
        self.schedule.len() + 1
    }

    /// The training config of `method` for run `seed`.
    pub fn config_for(&self, method: Method, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        // runs end at the threshold or the step cap, never on early stopping
        cfg.patience = None;
        match method.criterion_kind() {
            Some(kind) => cfg.criterion = self.criterion(kind)?.clone(),
            None => {
                cfg.max_steps_per_stage =
                    self.fixed_max_steps.unwrap_or(self.train.max_steps_per_stage * self.segment_count());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self, methods: &[Method]) -> Result<()> {
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::InvalidConfig(format!("val_frac must be in (0, 1), got {}", self.val_frac)));
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidConfig("threshold must be finite".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        for &m in methods {
            self.config_for(m, 0)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cost: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub reached: bool,
    pub cost_to_threshold: Option<f64>,
    pub wall_to_threshold_s: Option<f64>,
    /// Cost spent when the run ended, reached or not.
    pub total_cost: f64,
    pub wall_time_s: f64,
    pub best_val_loss: f64,
    pub curve: Vec<CurvePoint>,
    /// Cumulative cost at the end of each training segment.
    pub stage_boundaries: Vec<f64>,
    pub stage_steps: Vec<usize>,
    pub stage_params: Vec<usize>,
}

impl RunResult {
    /// Cost with unreached runs ranked last.
    pub fn cost_or_inf(&self) -> f64 {
        self.cost_to_threshold.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub reached: usize,
    /// Over all runs, unreached ones counted as infinite (`None`).
    pub median_cost: Option<f64>,
    /// Over reached runs only.
    pub cost: Option<Summary>,
    pub wall_s: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
    pub summaries: Vec<MethodSummary>,
    /// Set when no run reached the threshold.
    pub threshold_unreachable: bool,
}

impl ComparisonReport {
    pub fn summary(&self, m: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == m)
    }

    pub fn run(&self, m: Method, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.method == m && r.seed == seed)
    }
}

fn median_with_inf(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    m.is_finite().then_some(m)
}

pub fn summarize(method: Method, runs: &[&RunResult]) -> MethodSummary {
    let reached: Vec<&&RunResult> = runs.iter().filter(|r| r.reached).collect();
    MethodSummary {
        method,
        runs: runs.len(),
        reached: reached.len(),
        median_cost: median_with_inf(runs.iter().map(|r| r.cost_or_inf()).collect()),
        cost: Summary::of(&reached.iter().filter_map(|r| r.cost_to_threshold).collect::<Vec<_>>()),
        wall_s: Summary::of(&reached.iter().filter_map(|r| r.wall_to_threshold_s).collect::<Vec<_>>()),
    }
}

/// Trains one method on one split until the validation loss reaches the
/// threshold or the run ends on its own.
pub fn run_one(
    setup: &ComparisonSetup,
    cfg: &TrainConfig,
    method: Method,
    train: &RawDataset,
    val: &RawDataset,
) -> Result<RunResult> {
    let start = Instant::now();
    let threshold = setup.threshold;
    let mut hit: Option<(f64, f64)> = None;
    let mut best = f64::INFINITY;
    let mut observer = |e: &EvalEvent| {
        let v = e.val_loss.unwrap_or(f64::INFINITY);
        best = best.min(v);
        if v <= threshold {
            hit = Some((e.cost, start.elapsed().as_secs_f64()));
            Control::Stop
        } else {
            Control::Continue
        }
    };
    let opts = RunOptions { val: Some(val), observer: Some(&mut observer), ..RunOptions::default() };
    let report: TrainReport = match method {
        Method::FixedResolution => {
            let (gb, gc) = setup.schedule.finest();
            let init = random_factored(train.meta.n_tasks, gb, gc, cfg)?;
            train_fixed(init, train, cfg, opts)?.1
        }
        _ => mrtl_train(&setup.schedule, train, cfg, opts)?.1,
    };
    let mut acc = 0.0;
    let stage_boundaries = report
        .stages
        .iter()
        .map(|s| {
            acc += s.weighted_cost;
            acc
        })
        .collect();
    Ok(RunResult {
        method,
        seed: cfg.seed,
        reached: hit.is_some(),
        cost_to_threshold: hit.map(|h| h.0),
        wall_to_threshold_s: hit.map(|h| h.1),
        total_cost: report.total_weighted_cost,
        wall_time_s: start.elapsed().as_secs_f64(),
        best_val_loss: best,
        curve: report
            .evals
            .iter()
            .filter_map(|e| e.val_loss.map(|v| CurvePoint { cost: e.cost, val_loss: v }))
            .collect(),
        stage_boundaries,
        stage_steps: report.stages.iter().map(|s| s.steps).collect(),
        stage_params: report.stages.iter().map(|s| s.param_count).collect(),
    })
}

/// Runs `jobs` on up to `workers` threads, results in job order.
pub(crate) fn run_parallel<J: Sync, T: Send>(
    jobs: &[J],
    workers: usize,
    f: impl Fn(&J) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let slots: Vec<Mutex<Option<Result<T>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("result slot").expect("job ran")).collect()
}

/// Per seed, splits the data (validation fraction fixed by the seed) and
/// trains every method on the same split with the same seed.
pub fn run_comparison(
    data: &DataSource,
    setup: &ComparisonSetup,
    methods: &[Method],
    seeds: &[u64],
) -> Result<ComparisonReport> {
    setup.validate(methods)?;
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one method and one seed".into()));
    }
    let all = data.materialize()?;
    let splits: Vec<(RawDataset, RawDataset)> = seeds.iter().map(|&s| all.split(setup.val_frac, s)).collect();
    let jobs: Vec<(usize, Method)> = (0..seeds.len()).flat_map(|i| methods.iter().map(move |&m| (i, m))).collect();
    let runs = run_parallel(&jobs, setup.workers, |&(i, m)| {
        let cfg = setup.config_for(m, seeds[i])?;
        run_one(setup, &cfg, m, &splits[i].0, &splits[i].1)
    })?;
    let summaries =
        methods.iter().map(|&m| summarize(m, &runs.iter().filter(|r| r.method == m).collect::<Vec<_>>())).collect();
    Ok(ComparisonReport {
        threshold: setup.threshold,
        seeds: seeds.to_vec(),
        threshold_unreachable: runs.iter().all(|r| !r.reached),
        runs,
        summaries,
    })
}

/// Mean validation loss of the data-generating model on the validation
/// part of the seed's split, at the finest grids of `schedule`.
pub fn oracle_val_loss(spec: &SyntheticSpec, schedule: &ResolutionSchedule, val_frac: f64, seed: u64) -> Result<f64> {
    let (ds, truth) = generate(spec)?;
    let (_, val) = ds.split(val_frac, seed);
    let (gb, gc) = schedule.finest();
    if truth.grid_b != gb || truth.grid_c != gc {
        return Err(Error::GridMismatch("schedule's finest grids differ from the generator's".into()));
    }
    truth.mean_log_loss(&encode_at(&val, &gb, &gc)?)
}

/// `method,seed,cost,val_loss`, one row per evaluation.
pub fn write_curves_csv<W: Write>(runs: &[RunResult], mut out: W) -> Result<()> {
    writeln!(out, "method,seed,cost,val_loss")?;
    for r in runs {
        for p in &r.curve {
            writeln!(out, "{},{},{},{}", r.method, r.seed, p.cost, p.val_loss)?;
        }
    }
    Ok(())
}
