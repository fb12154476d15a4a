//! Criterion sensitivity: τ drawn log-uniformly, one run per draw.

use mrtl_core::{CriterionConfig, CriterionKind, Error, RawDataset, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comparison::{run_one, run_parallel, ComparisonSetup, DataSource, Method};
use crate::stats::Summary;

/// Log-uniform sampling range of one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauRange {
    pub lo: f64,
    pub hi: f64,
}

impl TauRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tau range [{}, {}] must satisfy 0 < lo <= hi",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        // draw unconditionally so degenerate ranges consume the same stream
        let u: f64 = rng.random();
        if self.lo == self.hi {
            return self.lo;
        }
        (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauRanges {
    pub tau_l: TauRange,
    pub tau_s: TauRange,
    pub tau_mu: TauRange,
    pub tau_sigma: TauRange,
}

impl Default for TauRanges {
    fn default() -> Self {
        Self {
            tau_l: TauRange::new(1e-6, 1e-2),
            tau_s: TauRange::new(1e-6, 1e0),
            tau_mu: TauRange::new(1e-8, 1e-2),
            tau_sigma: TauRange::new(1e-8, 1e-1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDraw {
    pub tau_l: Option<f64>,
    pub tau_s: Option<f64>,
    pub tau_mu: Option<f64>,
    pub tau_sigma: Option<f64>,
    pub reached: bool,
    pub cost_to_threshold: Option<f64>,
    pub wall_to_threshold_s: Option<f64>,
    pub total_cost: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: CriterionKind,
    pub seed: u64,
    pub sweep_seed: u64,
    pub threshold: f64,
    pub draws: Vec<SweepDraw>,
    pub converged: usize,
    pub non_converged: usize,
    /// Weighted cost to threshold over converging draws.
    pub cost: Option<Summary>,
    pub wall_s: Option<Summary>,
}

/// Draws `n_draws` thresholds for `kind` (both τ_μ and τ_σ for the μ,σ
/// criterion) and trains one run per draw on the split of `seed`. The
/// other criterion settings come from `setup`.
pub fn sensitivity_sweep(
    data: &DataSource,
    setup: &ComparisonSetup,
    kind: CriterionKind,
    n_draws: usize,
    ranges: &TauRanges,
    seed: u64,
    sweep_seed: u64,
) -> Result<SweepResult> {
    if n_draws < 2 {
        return Err(Error::InvalidConfig(format!("a sweep needs at least 2 draws, got {n_draws}")));
    }
    let method = Method::ALL
        .into_iter()
        .find(|m| m.criterion_kind() == Some(kind))
        .ok_or_else(|| Error::InvalidConfig(format!("{} has no benchmark method", kind.name())))?;
    for r in [ranges.tau_l, ranges.tau_s, ranges.tau_mu, ranges.tau_sigma] {
        r.validate()?;
    }
    let base = setup.criterion(kind)?.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(sweep_seed);
    let configs: Vec<CriterionConfig> = (0..n_draws)
        .map(|_| {
            let mut c = base.clone();
            match kind {
                CriterionKind::LossConvergence => c.tau_l = Some(ranges.tau_l.draw(&mut rng)),
                CriterionKind::EntropyThreshold => c.tau_s = Some(ranges.tau_s.draw(&mut rng)),
                CriterionKind::SigmaThreshold => c.tau_sigma = Some(ranges.tau_sigma.draw(&mut rng)),
                CriterionKind::MuSigmaThreshold => {
                    c.tau_mu = Some(ranges.tau_mu.draw(&mut rng));
                    c.tau_sigma = Some(ranges.tau_sigma.draw(&mut rng));
                }
                CriterionKind::ParamStep => unreachable!("no benchmark method"),
            }
            c
        })
        .collect();

    setup.validate(&[method])?;
    let all: RawDataset = data.materialize()?;
    let (train, val) = all.split(setup.val_frac, seed);
    let base_cfg = setup.config_for(method, seed)?;
    let runs = run_parallel(&configs, setup.workers, |c| {
        let mut cfg = base_cfg.clone();
        cfg.criterion = c.clone();
        cfg.validate()?;
        run_one(setup, &cfg, method, &train, &val)
    })?;

    let draws: Vec<SweepDraw> = configs
        .iter()
        .zip(&runs)
        .map(|(c, r)| SweepDraw {
            tau_l: c.tau_l.filter(|_| kind == CriterionKind::LossConvergence),
            tau_s: c.tau_s.filter(|_| kind == CriterionKind::EntropyThreshold),
            tau_mu: c.tau_mu.filter(|_| kind == CriterionKind::MuSigmaThreshold),
            tau_sigma: c
                .tau_sigma
                .filter(|_| matches!(kind, CriterionKind::SigmaThreshold | CriterionKind::MuSigmaThreshold)),
            reached: r.reached,
            cost_to_threshold: r.cost_to_threshold,
            wall_to_threshold_s: r.wall_to_threshold_s,
            total_cost: r.total_cost,
            best_val_loss: r.best_val_loss,
        })
        .collect();
    let converged = draws.iter().filter(|d| d.reached).count();
    Ok(SweepResult {
        kind,
        seed,
        sweep_seed,
        threshold: setup.threshold,
        converged,
        non_converged: draws.len() - converged,
        cost: Summary::of(&draws.iter().filter_map(|d| d.cost_to_threshold).collect::<Vec<_>>()),
        wall_s: Summary::of(&draws.iter().filter_map(|d| d.wall_to_threshold_s).collect::<Vec<_>>()),
        draws,
    })
}

/// `kind,draw,tau_l,tau_s,tau_mu,tau_sigma,reached,cost`, one row per draw.
pub fn sweep_csv(s: &SweepResult) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("kind,draw,tau_l,tau_s,tau_mu,tau_sigma,reached,cost\n");
    for (i, d) in s.draws.iter().enumerate() {
        out.push_str(&format!(
            "{},{i},{},{},{},{},{},{}\n",
            s.kind.name(),
            opt(d.tau_l),
            opt(d.tau_s),
            opt(d.tau_mu),
            opt(d.tau_sigma),
            d.reached,
            opt(d.cost_to_threshold)
        ));
    }
    out
}
