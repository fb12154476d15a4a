//! Multi-resolution training: a full-rank phase over coarse grids, a CP
//! factorization, then a factored phase up to the finest grids, with
//! weights carried across resolutions by prolongation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{encode_at, RawDataset};
use crate::error::{Error, Result};
use crate::gradstats::{should_finegrain, CriterionConfig, DiagnosticRecord, GradStatsBuffer, Grouping, ScalarHistory};
use crate::grid::{Grid, Point, RefinementMap};
use crate::model::{
    loss_and_grad_sharded, AnyModel, Example, FactoredModel, FullTensorModel, RegConfig, SpatialMode, SpatialModel,
};
use crate::optim::{learning_rate_at, Optimizer, OptimizerConfig, StepDecay};
use crate::tensor::{cp_als, CpFactors, DenseTensor3, Mat};

pub const DEFAULT_MEMORY_BUDGET: usize = 256 * 1024 * 1024;

/// How coarse weights are lifted onto a finer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prolongation {
    /// Each child copies its parent. Preserves predictions exactly.
    #[default]
    Replicate,
    /// Bilinear interpolation between coarse cell centers. Smoother, but
    /// does not preserve predictions.
    Bilinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionSchedule {
    pub grids_b: Vec<Grid>,
    pub grids_c: Vec<Grid>,
    pub refmaps_b: Vec<RefinementMap>,
    pub refmaps_c: Vec<RefinementMap>,
    /// Number of full-rank stages; the factorization happens at stage
    /// `split_index - 1`.
    pub split_index: usize,
}

fn connect(coarse: Grid, fine: Grid) -> Result<RefinementMap> {
    if coarse == fine {
        return Ok(RefinementMap::identity(coarse));
    }
    let (dyadic, map) = coarse.refine_dyadic();
    if dyadic == fine {
        return Ok(map);
    }
    RefinementMap::by_center(coarse, fine)
}

impl ResolutionSchedule {
    /// Builds the refinement maps between consecutive grids. A mode may
    /// keep its grid between stages, but every stage must add cells.
    pub fn new(grids_b: Vec<Grid>, grids_c: Vec<Grid>, split_index: usize) -> Result<Self> {
        if grids_b.is_empty() || grids_b.len() != grids_c.len() {
            return Err(Error::InvalidConfig(format!(
                "schedule needs equally many b and c grids, got {} and {}",
                grids_b.len(),
                grids_c.len()
            )));
        }
        let n = grids_b.len();
        if !(1..=n).contains(&split_index) {
            return Err(Error::InvalidConfig(format!("split_index must lie in 1..={n}, got {split_index}")));
        }
        let mut refmaps_b = Vec::with_capacity(n - 1);
        let mut refmaps_c = Vec::with_capacity(n - 1);
        for s in 1..n {
            let (pb, fb) = (grids_b[s - 1], grids_b[s]);
            let (pc, fc) = (grids_c[s - 1], grids_c[s]);
            if fb.cell_count() < pb.cell_count() || fc.cell_count() < pc.cell_count() {
                return Err(Error::InvalidConfig(format!("stage {s} has fewer cells than stage {}", s - 1)));
            }
            if fb.cell_count() * fc.cell_count() <= pb.cell_count() * pc.cell_count() {
                return Err(Error::InvalidConfig(format!("stage {s} does not refine stage {}", s - 1)));
            }
            refmaps_b.push(connect(pb, fb)?);
            refmaps_c.push(connect(pc, fc)?);
        }
        Ok(Self { grids_b, grids_c, refmaps_b, refmaps_c, split_index })
    }

    /// `n_stages` dyadic refinements of both modes starting from the given
    /// grids.
    pub fn dyadic(base_b: Grid, base_c: Grid, n_stages: usize, split_index: usize) -> Result<Self> {
        Self::dyadic_per_mode(base_b, base_c, n_stages, true, split_index)
    }

    /// Like [`ResolutionSchedule::dyadic`], optionally keeping the c grid fixed.
    pub fn dyadic_per_mode(
        base_b: Grid,
        base_c: Grid,
        n_stages: usize,
        refine_c: bool,
        split_index: usize,
    ) -> Result<Self> {
        if n_stages == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one stage".into()));
        }
        let mut gb = vec![base_b];
        let mut gc = vec![base_c];
        for _ in 1..n_stages {
            gb.push(gb.last().expect("non-empty").refine_dyadic().0);
            let last = *gc.last().expect("non-empty");
            gc.push(if refine_c { last.refine_dyadic().0 } else { last });
        }
        Self::new(gb, gc, split_index)
    }

    pub fn len(&self) -> usize {
        self.grids_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids_b.is_empty()
    }

    pub fn full_tensor_bytes(&self, stage: usize, n_tasks: usize) -> usize {
        n_tasks * self.grids_b[stage].cell_count() * self.grids_c[stage].cell_count() * 8
    }

    /// Largest stage count whose last full tensor fits `budget` bytes.
    pub fn split_for_budget(grids_b: &[Grid], grids_c: &[Grid], n_tasks: usize, budget: usize) -> Result<usize> {
        let fits = grids_b
            .iter()
            .zip(grids_c)
            .take_while(|(b, c)| n_tasks * b.cell_count() * c.cell_count() * 8 <= budget)
            .count();
        if fits == 0 {
            let bytes = n_tasks * grids_b[0].cell_count() * grids_c[0].cell_count() * 8;
            return Err(Error::ScheduleTooLarge { stage: 0, bytes, budget });
        }
        Ok(fits)
    }

    pub fn finest(&self) -> (Grid, Grid) {
        (*self.grids_b.last().expect("non-empty"), *self.grids_c.last().expect("non-empty"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "OptimizerConfig::adam")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
    pub batch_size: usize,
    pub max_steps_per_stage: usize,
    pub criterion: CriterionConfig,
    #[serde(default)]
    pub reg: RegConfig,
    pub rank_dense: usize,
    pub rank_sparse: usize,
    pub seed: u64,
    /// Validation cadence in steps; defaults to the criterion check interval.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Evaluations without validation improvement before the last segment
    /// stops early. `None` disables early stopping.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    #[serde(default = "default_als_max_iters")]
    pub als_max_iters: usize,
    #[serde(default = "default_als_tol")]
    pub als_tol: f64,
    #[serde(default = "default_memory_budget")]
    pub memory_budget: usize,
    /// Batch shards evaluated in parallel per step.
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub prolongation: Prolongation,
    /// Half-width of the uniform draw for randomly initialized factors.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_patience() -> Option<usize> {
    Some(5)
}
fn default_als_max_iters() -> usize {
    200
}
fn default_als_tol() -> f64 {
    1e-10
}
fn default_memory_budget() -> usize {
    DEFAULT_MEMORY_BUDGET
}
fn default_threads() -> usize {
    1
}
fn default_init_scale() -> f64 {
    0.5
}

impl TrainConfig {
    pub fn new(learning_rate: f64, criterion: CriterionConfig, rank_dense: usize, rank_sparse: usize) -> Self {
        Self {
            learning_rate,
            optimizer: OptimizerConfig::adam(),
            lr_decay: None,
            batch_size: 32,
            max_steps_per_stage: 10_000,
            criterion,
            reg: RegConfig::default(),
            rank_dense,
            rank_sparse,
            seed: 0,
            eval_every: None,
            patience: default_patience(),
            als_max_iters: default_als_max_iters(),
            als_tol: default_als_tol(),
            memory_budget: default_memory_budget(),
            threads: 1,
            prolongation: Prolongation::Replicate,
            init_scale: default_init_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_steps_per_stage == 0 {
            return bad("max_steps_per_stage must be >= 1".into());
        }
        if self.rank_dense == 0 || self.rank_sparse == 0 {
            return bad("rank_dense and rank_sparse must be >= 1".into());
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be >= 1".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if self.als_max_iters == 0 || !(self.als_tol > 0.0) {
            return bad("als_max_iters and als_tol must be positive".into());
        }
        if !(self.init_scale > 0.0) {
            return bad("init_scale must be positive".into());
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return bad("lr_decay needs every >= 1 and factor > 0".into());
            }
        }
        self.optimizer.validate()?;
        self.reg.validate()?;
        self.criterion.validate()
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every.unwrap_or(self.criterion.check_every)
    }
}

/// Endless seed-derived minibatch index stream. Epoch `e` is a fresh
/// permutation drawn from ChaCha stream `e`, so the position alone
/// determines the state.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
    consumed: u64,
}

impl BatchStream {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut s = Self { n, seed, epoch: 0, perm: Vec::new(), pos: 0, consumed: 0 };
        s.shuffle();
        Ok(s)
    }

    /// The stream after `consumed` examples have been drawn.
    pub fn at(n: usize, seed: u64, consumed: u64) -> Result<Self> {
        let mut s = Self::new(n, seed)?;
        let epochs = consumed / n as u64;
        if epochs > 0 {
            s.epoch = epochs;
            s.shuffle();
        }
        s.pos = (consumed % n as u64) as usize;
        s.consumed = consumed;
        Ok(s)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.perm = (0..self.n).collect();
        self.perm.shuffle(&mut rng);
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.pos = 0;
                self.shuffle();
            }
            let take = (size - out.len()).min(self.n - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
            self.pos += take;
        }
        self.consumed += size as u64;
        out
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Full,
    Factored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Criterion,
    StepCap,
    EarlyStop,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub segment: usize,
    pub stage: usize,
    pub phase: Phase,
    pub grid_b: [usize; 2],
    pub grid_c: [usize; 2],
    pub param_count: usize,
    pub steps: usize,
    pub weighted_cost: f64,
    pub wall_time_s: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Step within the segment at which the criterion fired.
    pub fired_at: Option<usize>,
    pub timed_out: bool,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub segment: usize,
    pub global_step: usize,
    pub cost: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub stages: Vec<StageRecord>,
    /// First factored segment, if the run got that far.
    pub factorized_at: Option<usize>,
    pub als_fit: Option<f64>,
    pub evals: Vec<EvalPoint>,
    pub total_steps: usize,
    pub total_weighted_cost: f64,
    pub stopped_by_observer: bool,
}

impl TrainReport {
    /// Recomputes the cost from per-stage steps and parameter counts.
    pub fn recomputed_cost(&self) -> f64 {
        self.stages.iter().map(|s| s.steps as f64 * s.param_count as f64).sum()
    }

    /// Wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainReport {
        let mut r = self.clone();
        r.stages.iter_mut().for_each(|s| s.wall_time_s = 0.0);
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalEvent {
    pub segment: usize,
    pub stage: usize,
    pub phase: Phase,
    pub global_step: usize,
    /// Cumulative weighted cost of the run so far.
    pub cost: f64,
    /// Mean minibatch loss since the previous evaluation.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub last_segment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub trait Observer {
    fn on_eval(&mut self, e: &EvalEvent) -> Control;
}

impl<F: FnMut(&EvalEvent) -> Control> Observer for F {
    fn on_eval(&mut self, e: &EvalEvent) -> Control {
        self(e)
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub val: Option<&'a RawDataset>,
    pub observer: Option<&'a mut dyn Observer>,
    /// Directory for checkpoints and `diagnostics.jsonl`.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
}

fn grid_mismatch(what: &str, have: Grid, want: Grid) -> Error {
    Error::GridMismatch(format!(
        "{what}: model grid {}x{} does not match map grid {}x{}",
        have.rows, have.cols, want.rows, want.cols
    ))
}

fn bilinear_weights(g: &Grid, p: Point) -> Vec<(usize, f64)> {
    let axis = |x: f64, origin: f64, n: usize| {
        let u = ((x - origin) / g.cell_size - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n.saturating_sub(2));
        ((i0, (i0 + 1).min(n - 1)), u - i0 as f64)
    };
    let ((c0, c1), fx) = axis(p[0], g.origin[0], g.cols);
    let ((r0, r1), fy) = axis(p[1], g.origin[1], g.rows);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (idx, w) in [
        (g.index(r0, c0), (1.0 - fy) * (1.0 - fx)),
        (g.index(r0, c1), (1.0 - fy) * fx),
        (g.index(r1, c0), fy * (1.0 - fx)),
        (g.index(r1, c1), fy * fx),
    ] {
        if w == 0.0 {
            continue;
        }
        match out.iter_mut().find(|(i, _)| *i == idx) {
            Some(e) => e.1 += w,
            None => out.push((idx, w)),
        }
    }
    out
}

/// For each fine cell, the coarse cells and weights it draws from.
pub fn prolongation_weights(map: &RefinementMap, kind: Prolongation) -> Vec<Vec<(usize, f64)>> {
    match kind {
        Prolongation::Replicate => map.parents().iter().map(|&p| vec![(p, 1.0)]).collect(),
        Prolongation::Bilinear if map.is_identity() => map.parents().iter().map(|&p| vec![(p, 1.0)]).collect(),
        Prolongation::Bilinear => {
            (0..map.fine.cell_count()).map(|f| bilinear_weights(&map.coarse, map.fine.cell_center(f))).collect()
        }
    }
}

fn prolong_rows(m: &Mat, weights: &[Vec<(usize, f64)>]) -> Mat {
    let mut out = Mat::zeros(weights.len(), m.cols);
    for (f, ws) in weights.iter().enumerate() {
        let row = out.row_mut(f);
        for &(c, w) in ws {
            for (o, v) in row.iter_mut().zip(m.row(c)) {
                *o += w * v;
            }
        }
    }
    out
}

pub fn finegrain_full(m: &FullTensorModel, rm_b: &RefinementMap, rm_c: &RefinementMap) -> Result<FullTensorModel> {
    finegrain_full_with(m, rm_b, rm_c, Prolongation::Replicate)
}

pub fn finegrain_full_with(
    m: &FullTensorModel,
    rm_b: &RefinementMap,
    rm_c: &RefinementMap,
    kind: Prolongation,
) -> Result<FullTensorModel> {
    if m.grid_b != rm_b.coarse {
        return Err(grid_mismatch("mode b", m.grid_b, rm_b.coarse));
    }
    if m.grid_c != rm_c.coarse {
        return Err(grid_mismatch("mode c", m.grid_c, rm_c.coarse));
    }
    let wb = prolongation_weights(rm_b, kind);
    let wc = prolongation_weights(rm_c, kind);
    let (na, _, _) = m.weights.dims;
    let (mbf, mcf) = (wb.len(), wc.len());
    let w = &m.weights;
    let mut out = DenseTensor3::zeros((na, mbf, mcf));
    for a in 0..na {
        for (bf, wsb) in wb.iter().enumerate() {
            for (cf, wsc) in wc.iter().enumerate() {
                let mut v = 0.0;
                for &(b, x) in wsb {
                    for &(c, y) in wsc {
                        v += x * y * w.get(a, b, c);
                    }
                }
                out.set(a, bf, cf, v);
            }
        }
    }
    FullTensorModel::new(out, m.bias.clone(), rm_b.fine, rm_c.fine)
}

pub fn finegrain_factors(m: &FactoredModel, rm_b: &RefinementMap, rm_c: &RefinementMap) -> Result<FactoredModel> {
    finegrain_factors_with(m, rm_b, rm_c, Prolongation::Replicate)
}

pub fn finegrain_factors_with(
    m: &FactoredModel,
    rm_b: &RefinementMap,
    rm_c: &RefinementMap,
    kind: Prolongation,
) -> Result<FactoredModel> {
    if m.grid_b != rm_b.coarse {
        return Err(grid_mismatch("mode b", m.grid_b, rm_b.coarse));
    }
    if m.grid_c != rm_c.coarse {
        return Err(grid_mismatch("mode c", m.grid_c, rm_c.coarse));
    }
    let wb = prolongation_weights(rm_b, kind);
    let wc = prolongation_weights(rm_c, kind);
    let lift = |f: &CpFactors| CpFactors::new(f.a.clone(), prolong_rows(&f.b, &wb), prolong_rows(&f.c, &wc));
    FactoredModel::new(lift(&m.dense)?, lift(&m.sparse)?, m.bias.clone(), rm_b.fine, rm_c.fine)
}

/// Fits rank `kd + ks` CP factors to the full tensor and splits them by
/// component norm: the `kd` largest become the dense part. Returns the
/// model and the ALS fit.
pub fn factorize(
    m: &FullTensorModel,
    kd: usize,
    ks: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(FactoredModel, f64)> {
    let res = cp_als(&m.weights, kd + ks, max_iters, tol, seed)?;
    let mut f = res.factors;
    f.balance();
    let (dense, sparse) = f.split_by_norm(kd)?;
    Ok((FactoredModel::new(dense, sparse, m.bias.clone(), m.grid_b, m.grid_c)?, res.fit))
}

/// Frobenius norm of the difference of all parameters.
pub fn fixed_point_residual(prev: &dyn SpatialModel, cur: &dyn SpatialModel) -> Result<f64> {
    let (p, c) = (prev.blocks(), cur.blocks());
    if p.len() != c.len() || p.iter().zip(&c).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::ShapeMismatch("models have different parameter layouts".into()));
    }
    let sq: f64 = p.iter().zip(&c).flat_map(|(x, y)| x.iter().zip(y.iter())).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq.sqrt())
}

/// Per-segment inputs to [`sgd_se`] beyond the model and data.
pub struct SegmentContext<'a, 'o> {
    pub segment: usize,
    pub stage: usize,
    pub phase: Phase,
    /// Whether the transition criterion may end this segment.
    pub use_criterion: bool,
    /// Whether this is the last segment of the run (early stopping applies).
    pub last_segment: bool,
    pub val: Option<&'a [Example]>,
    pub stream: &'a mut BatchStream,
    pub observer: Option<&'a mut (dyn Observer + 'o)>,
    pub diagnostics: Option<&'a mut dyn Write>,
    /// Steps and cost accumulated before this segment.
    pub global_step: usize,
    pub cost_before: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutcome {
    pub record: StageRecord,
    pub evals: Vec<EvalPoint>,
    pub observer_stop: bool,
}

fn group_count<M: SpatialModel + ?Sized>(m: &M, grouping: Grouping) -> usize {
    match grouping {
        Grouping::CellB => m.grid_b().cell_count(),
        Grouping::CellC => m.grid_c().cell_count(),
        Grouping::PerWeight => m.param_count() - m.n_tasks(),
    }
}

fn aggregates<M: SpatialModel + ?Sized>(m: &M, grad: &crate::model::Gradient, grouping: Grouping) -> Vec<f64> {
    match grouping {
        Grouping::CellB => m.cell_aggregates(grad, SpatialMode::B),
        Grouping::CellC => m.cell_aggregates(grad, SpatialMode::C),
        Grouping::PerWeight => m.weight_gradients(grad),
    }
}

/// Trains one segment at a fixed resolution. Every step pushes the
/// per-group gradient aggregates into `buf`; the criterion is evaluated at
/// multiples of its check interval once `min_steps` steps have run. The
/// segment ends when the criterion fires, at the step cap, on early
/// stopping (last segment only) or when the observer asks to stop.
pub fn sgd_se<M: SpatialModel + Sync>(
    model: &mut M,
    data: &[Example],
    cfg: &TrainConfig,
    buf: &mut GradStatsBuffer,
    ctx: SegmentContext<'_, '_>,
) -> Result<SegmentOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let start = Instant::now();
    let crit = &cfg.criterion;
    let min_steps = crit.min_steps();
    let omega = crit.check_every;
    let eval_every = cfg.eval_interval();
    let params = model.param_count();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut losses: Vec<f64> = Vec::new();
    let mut since_eval = (0.0, 0usize);
    let mut evals = Vec::new();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut stale = 0usize;
    let mut fired_at = None;
    let mut stop = StopReason::StepCap;
    let mut observer_stop = false;
    let SegmentContext {
        segment,
        stage,
        phase,
        use_criterion,
        last_segment,
        val,
        stream,
        mut observer,
        mut diagnostics,
        global_step,
        cost_before,
    } = ctx;
    let early_stop = last_segment && val.is_some() && cfg.patience.is_some();

    let mut steps = 0usize;
    let mut batch: Vec<Example> = Vec::with_capacity(cfg.batch_size);
    let mut last_eval_step = 0usize;
    let evaluate = |model: &M, steps: usize, since: (f64, usize), evals: &mut Vec<EvalPoint>| -> Result<EvalEvent> {
        let val_loss = match val {
            Some(v) if !v.is_empty() => Some(model.mean_log_loss(v)?),
            _ => None,
        };
        let train_loss = if since.1 > 0 { since.0 / since.1 as f64 } else { f64::NAN };
        let ev = EvalEvent {
            segment,
            stage,
            phase,
            global_step: global_step + steps,
            cost: cost_before + (steps * params) as f64,
            train_loss,
            val_loss,
            last_segment,
        };
        evals.push(EvalPoint { segment, global_step: ev.global_step, cost: ev.cost, train_loss, val_loss });
        Ok(ev)
    };

    while steps < cfg.max_steps_per_stage {
        batch.clear();
        batch.extend(stream.next_batch(cfg.batch_size).into_iter().map(|i| data[i].clone()));
        let (loss, grad) = loss_and_grad_sharded(model, &batch, &cfg.reg, cfg.threads)?;
        buf.push(&aggregates(model, &grad, crit.grouping))?;
        losses.push(loss);
        since_eval.0 += loss;
        since_eval.1 += 1;
        let lr = learning_rate_at(cfg.learning_rate, cfg.lr_decay, steps);
        let last_step_norm = Some(opt.step(&mut model.blocks_mut(), &grad, lr)?);
        steps += 1;

        if steps.is_multiple_of(eval_every) {
            let ev = evaluate(model, steps, since_eval, &mut evals)?;
            since_eval = (0.0, 0);
            last_eval_step = steps;
            if early_stop {
                let v = ev.val_loss.expect("validation present");
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, model.blocks().iter().map(|b| b.to_vec()).collect()));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            if let Some(obs) = observer.as_deref_mut() {
                if obs.on_eval(&ev) == Control::Stop {
                    observer_stop = true;
                    stop = StopReason::Observer;
                    break;
                }
            }
            if early_stop && stale >= cfg.patience.expect("checked") {
                stop = StopReason::EarlyStop;
                break;
            }
        }

        if use_criterion && steps >= min_steps && steps.is_multiple_of(omega) {
            let d = should_finegrain(crit, buf, ScalarHistory { losses: &losses, last_step_norm })?;
            if let Some(w) = diagnostics.as_deref_mut() {
                DiagnosticRecord::new(global_step + steps, stage, crit.kind, &d).write_jsonl(w)?;
            }
            if d.fire {
                fired_at = Some(steps);
                stop = StopReason::Criterion;
                break;
            }
        }
    }

    if stop == StopReason::EarlyStop {
        if let Some((_, saved)) = best.take() {
            for (dst, src) in model.blocks_mut().into_iter().zip(saved) {
                dst.copy_from_slice(&src);
            }
        }
    }
    if last_eval_step != steps && !observer_stop {
        let ev = evaluate(model, steps, since_eval, &mut evals)?;
        if let Some(obs) = observer {
            if obs.on_eval(&ev) == Control::Stop {
                observer_stop = true;
            }
        }
    }

    let val_loss = match val {
        Some(v) if !v.is_empty() => Some(model.mean_log_loss(v)?),
        _ => None,
    };
    let (gb, gc) = (model.grid_b(), model.grid_c());
    let record = StageRecord {
        segment,
        stage,
        phase,
        grid_b: [gb.rows, gb.cols],
        grid_c: [gc.rows, gc.cols],
        param_count: params,
        steps,
        weighted_cost: (steps * params) as f64,
        wall_time_s: start.elapsed().as_secs_f64(),
        train_loss: model.mean_log_loss(data)?,
        val_loss,
        fired_at,
        timed_out: stop == StopReason::StepCap,
        stop,
    };
    Ok(SegmentOutcome { record, evals, observer_stop })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Segment {
    phase: Phase,
    stage: usize,
}

fn segments(schedule: &ResolutionSchedule) -> Vec<Segment> {
    let f = schedule.split_index - 1;
    let mut out: Vec<Segment> = (0..=f).map(|stage| Segment { phase: Phase::Full, stage }).collect();
    out.extend((f..schedule.len()).map(|stage| Segment { phase: Phase::Factored, stage }));
    out
}

struct Encoded {
    stage: usize,
    train: Vec<Example>,
    val: Option<Vec<Example>>,
}

fn encode_stage(
    schedule: &ResolutionSchedule,
    stage: usize,
    train: &RawDataset,
    val: Option<&RawDataset>,
) -> Result<Encoded> {
    let (gb, gc) = (schedule.grids_b[stage], schedule.grids_c[stage]);
    Ok(Encoded { stage, train: encode_at(train, &gb, &gc)?, val: val.map(|v| encode_at(v, &gb, &gc)).transpose()? })
}

fn validate_run(
    schedule: &ResolutionSchedule,
    train: &RawDataset,
    val: Option<&RawDataset>,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(v) = val {
        if v.meta.n_tasks != train.meta.n_tasks {
            return Err(Error::DimensionMismatch(format!(
                "validation has {} tasks, training has {}",
                v.meta.n_tasks, train.meta.n_tasks
            )));
        }
    }
    let f = schedule.split_index - 1;
    let bytes = schedule.full_tensor_bytes(f, train.meta.n_tasks);
    if bytes > cfg.memory_budget {
        return Err(Error::ScheduleTooLarge { stage: f, bytes, budget: cfg.memory_budget });
    }
    Ok(())
}

struct Sink {
    diagnostics: Option<BufWriter<File>>,
}

fn save_ck(out_dir: Option<&Path>, name: &str, ck: Checkpoint) -> Result<()> {
    if let Some(dir) = out_dir {
        checkpoint::save(dir.join(name), &ck)?;
    }
    Ok(())
}

/// Runs the full multi-resolution schedule.
///
/// Segments are: full-rank training at stages `0..split_index`, then
/// factored training at stages `split_index - 1..` (the first factored
/// segment fine-tunes at the factorization resolution). The returned
/// model is factored unless the observer stopped the run during the
/// full-rank phase.
pub fn mrtl_train(
    schedule: &ResolutionSchedule,
    train: &RawDataset,
    cfg: &TrainConfig,
    mut opts: RunOptions<'_>,
) -> Result<(AnyModel, TrainReport)> {
    validate_run(schedule, train, opts.val, cfg)?;
    let segs = segments(schedule);
    let n_tasks = train.meta.n_tasks;
    let mut sink = Sink {
        diagnostics: match opts.out_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Some(BufWriter::new(File::create(d.join("diagnostics.jsonl"))?))
            }
            None => None,
        },
    };

    let (mut model, mut seg_idx, consumed) = match opts.resume.take() {
        Some(ck) => {
            if ck.segment >= segs.len() || segs[ck.segment].stage != ck.stage {
                return Err(Error::Checkpoint(format!(
                    "segment {} / stage {} does not belong to this schedule",
                    ck.segment, ck.stage
                )));
            }
            let m = if ck.trained {
                if ck.segment + 1 == segs.len() {
                    return Err(Error::Checkpoint("checkpoint is already the final model".into()));
                }
                transition(schedule, &segs, ck.segment, ck.model, cfg, &mut TrainReport::default())?
            } else {
                ck.model
            };
            let s = if ck.trained { ck.segment + 1 } else { ck.segment };
            (m, s, ck.examples_consumed)
        }
        None => {
            let (gb, gc) = (schedule.grids_b[0], schedule.grids_c[0]);
            (AnyModel::Full(FullTensorModel::zeros(n_tasks, gb, gc)), 0, 0)
        }
    };
    check_model_matches(&model, &segs[seg_idx], schedule)?;

    let mut stream = BatchStream::at(train.len(), cfg.seed, consumed)?;
    let mut report = TrainReport::default();
    let mut enc: Option<Encoded> = None;
    loop {
        let seg = segs[seg_idx];
        if enc.as_ref().is_none_or(|e| e.stage != seg.stage) {
            drop(enc.take());
            enc = Some(encode_stage(schedule, seg.stage, train, opts.val)?);
        }
        let data = enc.as_ref().expect("encoded");
        let last = seg_idx + 1 == segs.len();
        let ctx = SegmentContext {
            segment: seg_idx,
            stage: seg.stage,
            phase: seg.phase,
            use_criterion: !last,
            last_segment: last,
            val: data.val.as_deref(),
            stream: &mut stream,
            observer: opts.observer.as_deref_mut(),
            diagnostics: sink.diagnostics.as_mut().map(|w| w as &mut dyn Write),
            global_step: report.total_steps,
            cost_before: report.total_weighted_cost,
        };
        let out = train_any(&mut model, &data.train, cfg, ctx)?;
        report.total_steps += out.record.steps;
        report.total_weighted_cost += out.record.weighted_cost;
        report.stages.push(out.record);
        report.evals.extend(out.evals);
        if out.observer_stop {
            report.stopped_by_observer = true;
            break;
        }
        if last {
            break;
        }
        save_ck(
            opts.out_dir,
            &format!("seg{seg_idx:02}_trained.ckpt"),
            Checkpoint {
                model: model.clone(),
                segment: seg_idx,
                stage: seg.stage,
                trained: true,
                examples_consumed: stream.consumed(),
            },
        )?;
        model = transition(schedule, &segs, seg_idx, model, cfg, &mut report)?;
        seg_idx += 1;
        save_ck(
            opts.out_dir,
            &format!("seg{seg_idx:02}_init.ckpt"),
            Checkpoint {
                model: model.clone(),
                segment: seg_idx,
                stage: segs[seg_idx].stage,
                trained: false,
                examples_consumed: stream.consumed(),
            },
        )?;
    }
    if let Some(w) = sink.diagnostics.as_mut() {
        w.flush()?;
    }
    save_ck(
        opts.out_dir,
        "final.ckpt",
        Checkpoint {
            model: model.clone(),
            segment: seg_idx,
            stage: segs[seg_idx].stage,
            trained: true,
            examples_consumed: stream.consumed(),
        },
    )?;
    Ok((model, report))
}

fn check_model_matches(model: &AnyModel, seg: &Segment, schedule: &ResolutionSchedule) -> Result<()> {
    let kind_ok =
        matches!((model, seg.phase), (AnyModel::Full(_), Phase::Full) | (AnyModel::Factored(_), Phase::Factored));
    let m = model.as_dyn();
    if !kind_ok || m.grid_b() != schedule.grids_b[seg.stage] || m.grid_c() != schedule.grids_c[seg.stage] {
        return Err(Error::Checkpoint(format!("model does not fit segment at stage {} ({:?})", seg.stage, seg.phase)));
    }
    Ok(())
}

fn train_any(
    model: &mut AnyModel,
    data: &[Example],
    cfg: &TrainConfig,
    ctx: SegmentContext<'_, '_>,
) -> Result<SegmentOutcome> {
    let groups = group_count(model.as_dyn(), cfg.criterion.grouping);
    let mut buf = GradStatsBuffer::new(groups, cfg.criterion.window, cfg.criterion.bins)?;
    match model {
        AnyModel::Full(m) => sgd_se(m, data, cfg, &mut buf, ctx),
        AnyModel::Factored(m) => sgd_se(m, data, cfg, &mut buf, ctx),
    }
}

fn transition(
    schedule: &ResolutionSchedule,
    segs: &[Segment],
    from: usize,
    model: AnyModel,
    cfg: &TrainConfig,
    report: &mut TrainReport,
) -> Result<AnyModel> {
    let (a, b) = (segs[from], segs[from + 1]);
    Ok(match (model, a.phase, b.phase) {
        (AnyModel::Full(m), Phase::Full, Phase::Full) => AnyModel::Full(finegrain_full_with(
            &m,
            &schedule.refmaps_b[a.stage],
            &schedule.refmaps_c[a.stage],
            cfg.prolongation,
        )?),
        (AnyModel::Full(m), Phase::Full, Phase::Factored) => {
            let (f, fit) = factorize(&m, cfg.rank_dense, cfg.rank_sparse, cfg.als_max_iters, cfg.als_tol, cfg.seed)?;
            report.factorized_at = Some(from + 1);
            report.als_fit = Some(fit);
            AnyModel::Factored(f)
        }
        (AnyModel::Factored(m), Phase::Factored, Phase::Factored) => AnyModel::Factored(finegrain_factors_with(
            &m,
            &schedule.refmaps_b[a.stage],
            &schedule.refmaps_c[a.stage],
            cfg.prolongation,
        )?),
        _ => return Err(Error::InvalidConfig("model kind does not match the schedule phase".into())),
    })
}

/// A factored model at the given grids with uniform random factors and
/// zero bias.
pub fn random_factored(n_tasks: usize, grid_b: Grid, grid_c: Grid, cfg: &TrainConfig) -> Result<FactoredModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = (n_tasks, grid_b.cell_count(), grid_c.cell_count());
    let dense = CpFactors::random_uniform(dims, cfg.rank_dense, cfg.init_scale, &mut rng);
    let sparse = CpFactors::random_uniform(dims, cfg.rank_sparse, cfg.init_scale, &mut rng);
    FactoredModel::new(dense, sparse, vec![0.0; n_tasks], grid_b, grid_c)
}

/// Single-resolution training of `init` with the same loop, stopping rules
/// and accounting as the last segment of [`mrtl_train`].
pub fn train_fixed(
    init: FactoredModel,
    train: &RawDataset,
    cfg: &TrainConfig,
    mut opts: RunOptions<'_>,
) -> Result<(FactoredModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut model = init;
    let train_ex = encode_at(train, &model.grid_b, &model.grid_c)?;
    let val_ex = opts.val.map(|v| encode_at(v, &model.grid_b, &model.grid_c)).transpose()?;
    let mut stream = BatchStream::new(train.len(), cfg.seed)?;
    let groups = group_count(&model, cfg.criterion.grouping);
    let mut buf = GradStatsBuffer::new(groups, cfg.criterion.window, cfg.criterion.bins)?;
    let ctx = SegmentContext {
        segment: 0,
        stage: 0,
        phase: Phase::Factored,
        use_criterion: false,
        last_segment: true,
        val: val_ex.as_deref(),
        stream: &mut stream,
        observer: opts.observer.as_deref_mut(),
        diagnostics: None,
        global_step: 0,
        cost_before: 0.0,
    };
    let out = sgd_se(&mut model, &train_ex, cfg, &mut buf, ctx)?;
    let report = TrainReport {
        total_steps: out.record.steps,
        total_weighted_cost: out.record.weighted_cost,
        stopped_by_observer: out.observer_stop,
        stages: vec![out.record],
        evals: out.evals,
        ..TrainReport::default()
    };
    Ok((model, report))
}
