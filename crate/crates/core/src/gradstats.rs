//! Rolling-window gradient statistics and the fine-graining criteria built
//! on them.
//!
//! Each tracked group (by default one spatial cell) keeps the last `window`
//! scalar gradient aggregates. Summaries are the sample mean, the population
//! standard deviation and the Shannon entropy (nats) of a `bins`-bin
//! equal-width histogram over the group's current `[min, max]`.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::RefinementMap;

/// Span used for the histogram when every sample in a window is identical.
const DEGENERATE_SPAN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mu: f64,
    pub sigma: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct GradStatsBuffer {
    window: usize,
    bins: usize,
    groups: Vec<VecDeque<f64>>,
}

impl GradStatsBuffer {
    pub fn new(groups: usize, window: usize, bins: usize) -> Result<Self> {
        if window < 2 {
            return Err(Error::InvalidConfig(format!("window must be >= 2, got {window}")));
        }
        if bins < 2 {
            return Err(Error::InvalidConfig(format!("bins must be >= 2, got {bins}")));
        }
        Ok(Self { window, bins, groups: vec![VecDeque::with_capacity(window); groups] })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn len(&self, group: usize) -> usize {
        self.groups.get(group).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.groups.iter().all(VecDeque::is_empty)
    }

    pub fn samples(&self, group: usize) -> impl Iterator<Item = f64> + '_ {
        self.groups[group].iter().copied()
    }

    /// Appends one aggregate per group, evicting the oldest sample once a
    /// group holds `window` values.
    pub fn push(&mut self, step_grads: &[f64]) -> Result<()> {
        if step_grads.len() != self.groups.len() {
            return Err(Error::LengthMismatch { expected: self.groups.len(), got: step_grads.len() });
        }
        for (buf, &g) in self.groups.iter_mut().zip(step_grads) {
            if buf.len() == self.window {
                buf.pop_front();
            }
            buf.push_back(g);
        }
        Ok(())
    }

    pub fn group_stats(&self, group: usize) -> Result<GroupStats> {
        let buf = self.groups.get(group).ok_or(Error::InvalidIndex { index: group, len: self.groups.len() })?;
        if buf.is_empty() {
            return Err(Error::EmptyBuffer(group));
        }
        let (a, b) = buf.as_slices();
        Ok(summarize(a.iter().chain(b).copied(), buf.len(), self.bins))
    }

    pub fn snapshot(&self) -> Result<StatsSnapshot> {
        let groups = (0..self.groups.len()).map(|g| self.group_stats(g)).collect::<Result<_>>()?;
        Ok(StatsSnapshot { window: self.window, bins: self.bins, groups })
    }
}

/// Mean, population standard deviation and histogram entropy of a sample.
pub fn summarize(samples: impl Iterator<Item = f64> + Clone, n: usize, bins: usize) -> GroupStats {
    let nf = n as f64;
    let mu = samples.clone().sum::<f64>() / nf;
    let var = samples.clone().map(|x| (x - mu).powi(2)).sum::<f64>() / nf;
    let (lo, hi) = samples.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let sigma = if lo == hi { 0.0 } else { var.sqrt() };
    GroupStats { mu, sigma, entropy: histogram_entropy(samples, n, bins, lo, hi) }
}

fn histogram_entropy(samples: impl Iterator<Item = f64>, n: usize, bins: usize, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { DEGENERATE_SPAN };
    let mut counts = vec![0usize; bins];
    for x in samples {
        let i = (((x - lo) / span) * bins as f64).floor() as usize;
        counts[i.min(bins - 1)] += 1;
    }
    let nf = n as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / nf;
            -q * q.ln()
        })
        .sum();
    // a single occupied bin gives -1*ln(1) = -0.0
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub window: usize,
    pub bins: usize,
    pub groups: Vec<GroupStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    LossConvergence,
    EntropyThreshold,
    SigmaThreshold,
    MuSigmaThreshold,
    /// Parameter change between consecutive iterates at or below `tau_step`.
    ParamStep,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 5] = [
        CriterionKind::LossConvergence,
        CriterionKind::EntropyThreshold,
        CriterionKind::SigmaThreshold,
        CriterionKind::MuSigmaThreshold,
        CriterionKind::ParamStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::LossConvergence => "loss_convergence",
            CriterionKind::EntropyThreshold => "entropy_threshold",
            CriterionKind::SigmaThreshold => "sigma_threshold",
            CriterionKind::MuSigmaThreshold => "mu_sigma_threshold",
            CriterionKind::ParamStep => "param_step",
        }
    }
}

/// What a gradient-statistics group stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One group per cell of the primary spatial mode.
    #[default]
    CellB,
    /// One group per cell of the context spatial mode.
    CellC,
    /// One group per non-bias weight. Only sensible for small models.
    PerWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionConfig {
    pub kind: CriterionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_step: Option<f64>,
    /// Fraction of groups that must satisfy the per-group predicate.
    pub p_frac: f64,
    /// Check frequency in steps.
    pub check_every: usize,
    /// Steps before the first check; defaults to `window`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_steps: Option<usize>,
    /// Rolling window length `T`.
    pub window: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub grouping: Grouping,
}

fn default_bins() -> usize {
    20
}

impl CriterionConfig {
    /// A config for `kind` with the common defaults (`p = 0.1`, `ω = 100`,
    /// `T = 100`, 20 bins) and no thresholds set.
    pub fn new(kind: CriterionKind) -> Self {
        Self {
            kind,
            tau_l: None,
            tau_s: None,
            tau_sigma: None,
            tau_mu: None,
            tau_step: None,
            p_frac: 0.1,
            check_every: 100,
            min_steps: None,
            window: 100,
            bins: default_bins(),
            grouping: Grouping::CellB,
        }
    }

    pub fn min_steps(&self) -> usize {
        self.min_steps.unwrap_or(self.window)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |name: &str, v: Option<f64>| -> Result<f64> {
            let v = v.ok_or_else(|| {
                Error::InvalidConfig(format!("criterion.{name} is required for {}", self.kind.name()))
            })?;
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("criterion.{name} must be finite")));
            }
            Ok(v)
        };
        match self.kind {
            CriterionKind::LossConvergence => {
                need("tau_l", self.tau_l)?;
            }
            CriterionKind::EntropyThreshold => {
                need("tau_s", self.tau_s)?;
            }
            CriterionKind::SigmaThreshold => {
                need("tau_sigma", self.tau_sigma)?;
            }
            CriterionKind::MuSigmaThreshold => {
                need("tau_sigma", self.tau_sigma)?;
                need("tau_mu", self.tau_mu)?;
            }
            CriterionKind::ParamStep => {
                need("tau_step", self.tau_step)?;
            }
        }
        if !(self.p_frac > 0.0 && self.p_frac <= 1.0) {
            return Err(Error::InvalidConfig(format!("criterion.p_frac must be in (0, 1], got {}", self.p_frac)));
        }
        if self.check_every == 0 {
            return Err(Error::InvalidConfig("criterion.check_every must be >= 1".into()));
        }
        if self.window < 2 {
            return Err(Error::InvalidConfig("criterion.window must be >= 2".into()));
        }
        if self.bins < 2 {
            return Err(Error::InvalidConfig("criterion.bins must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub fire: bool,
    /// Fraction of groups satisfying the predicate (0 or 1 for the
    /// loss and parameter-step criteria).
    pub firing_fraction: f64,
    pub snapshot: Option<StatsSnapshot>,
}

/// Inputs that are not gradient samples.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarHistory<'a> {
    /// Per-step training losses, oldest first.
    pub losses: &'a [f64],
    /// Norm of the most recent parameter update.
    pub last_step_norm: Option<f64>,
}

/// Evaluates the configured fine-graining criterion.
pub fn should_finegrain(cfg: &CriterionConfig, buf: &GradStatsBuffer, history: ScalarHistory<'_>) -> Result<Decision> {
    cfg.validate()?;
    let tau = |v: Option<f64>| v.expect("validated");
    match cfg.kind {
        CriterionKind::LossConvergence => {
            let losses = history.losses;
            if losses.len() < 2 {
                return Err(Error::InsufficientHistory(format!("{} loss points, need at least 2", losses.len())));
            }
            let tail = &losses[losses.len().saturating_sub(buf.window())..];
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            let current = *losses.last().expect("non-empty");
            let fire = (current - mean).abs() < tau(cfg.tau_l);
            Ok(Decision { fire, firing_fraction: if fire { 1.0 } else { 0.0 }, snapshot: None })
        }
        CriterionKind::ParamStep => {
            let step = history
                .last_step_norm
                .ok_or_else(|| Error::InsufficientHistory("no parameter update recorded".into()))?;
            let fire = step <= tau(cfg.tau_step);
            Ok(Decision { fire, firing_fraction: if fire { 1.0 } else { 0.0 }, snapshot: None })
        }
        kind => {
            if buf.group_count() == 0 || (0..buf.group_count()).any(|g| buf.len(g) == 0) {
                return Err(Error::InsufficientHistory("gradient buffers are empty".into()));
            }
            let snap = buf.snapshot()?;
            let pred: Box<dyn Fn(&GroupStats) -> bool> = match kind {
                CriterionKind::EntropyThreshold => {
                    let t = tau(cfg.tau_s);
                    Box::new(move |s| s.entropy > t)
                }
                CriterionKind::SigmaThreshold => {
                    let t = tau(cfg.tau_sigma);
                    Box::new(move |s| s.sigma > t)
                }
                CriterionKind::MuSigmaThreshold => {
                    let (ts, tm) = (tau(cfg.tau_sigma), tau(cfg.tau_mu));
                    Box::new(move |s| s.sigma > ts && s.mu.abs() < tm)
                }
                _ => unreachable!(),
            };
            let n = snap.groups.len();
            let hits = snap.groups.iter().filter(|s| pred(s)).count();
            let fraction = hits as f64 / n as f64;
            // ">= p%" is inclusive; compare counts to dodge 0.1*n rounding
            let needed = (cfg.p_frac * n as f64 - 1e-9).ceil().max(0.0) as usize;
            Ok(Decision { fire: hits >= needed, firing_fraction: fraction, snapshot: Some(snap) })
        }
    }
}

/// Entropy drop from each coarse group to the mean of its children,
/// measured after the fact on snapshots taken with equal windows.
pub fn retrospective_information_gain(
    before: &StatsSnapshot,
    after: &StatsSnapshot,
    mapping: &RefinementMap,
) -> Result<Vec<f64>> {
    if before.window != after.window || before.bins != after.bins {
        return Err(Error::WindowMismatch(format!(
            "before (T={}, B={}) vs after (T={}, B={})",
            before.window, before.bins, after.window, after.bins
        )));
    }
    if before.groups.len() != mapping.coarse.cell_count() || after.groups.len() != mapping.fine.cell_count() {
        return Err(Error::GridMismatch(format!(
            "snapshots have {} / {} groups, map connects {} / {} cells",
            before.groups.len(),
            after.groups.len(),
            mapping.coarse.cell_count(),
            mapping.fine.cell_count()
        )));
    }
    (0..before.groups.len())
        .map(|c| {
            let kids = mapping.children(c)?;
            let mean = kids.iter().map(|&f| after.groups[f].entropy).sum::<f64>() / kids.len() as f64;
            Ok(before.groups[c].entropy - mean)
        })
        .collect()
}

/// Five-number summary (min, quartiles, max).
pub fn quantiles(values: &[f64]) -> [f64; 5] {
    if values.is_empty() {
        return [f64::NAN; 5];
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (i, frac) = (pos.floor() as usize, pos.fract());
        if i + 1 < v.len() {
            v[i] + frac * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    [at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)]
}

/// One line of the diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub step: usize,
    pub stage: usize,
    pub criterion: CriterionKind,
    pub firing_fraction: f64,
    pub decision: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_quantiles: Option<[f64; 5]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_quantiles: Option<[f64; 5]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_quantiles: Option<[f64; 5]>,
}

impl DiagnosticRecord {
    pub fn new(step: usize, stage: usize, criterion: CriterionKind, d: &Decision) -> Self {
        let q = |f: fn(&GroupStats) -> f64| {
            d.snapshot.as_ref().map(|s| quantiles(&s.groups.iter().map(f).collect::<Vec<_>>()))
        };
        Self {
            step,
            stage,
            criterion,
            firing_fraction: d.firing_fraction,
            decision: d.fire,
            mu_quantiles: q(|s| s.mu),
            sigma_quantiles: q(|s| s.sigma),
            entropy_quantiles: q(|s| s.entropy),
        }
    }

    pub fn write_jsonl<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}
