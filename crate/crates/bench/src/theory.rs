//! Iteration-count and cost predictions checked on a quadratic whose
//! gradient-descent operator has a known contraction factor.
//!
//! The unknown is a function on `[0, 1]` discretized into `1/d` cells of
//! width `d`. At resolution `d` the objective is
//! `L_d(W) = ½ Σ d (W_i − w*_i)²` with `w*` the cell averages of a smooth
//! target, and the step size is `1 − α`, so `F_d(W) = αW + (1 − α)w*` and
//! every eigenvalue of `I − λ∇²L_d` (in the `d`-weighted metric) equals α.
//! Norms are `d`-weighted (`‖v‖_d² = d Σ v_i²`), making them comparable
//! across resolutions.
//!
//! Fixed resolution starts from zero at the finest grid and stops once the
//! a-posteriori bound `α/(1−α)·‖W^t − W^{t−1}‖` drops to ε/2. The
//! multi-resolution run halves `d` from `d_0` until `d ≤ (1−α)²ε`, starts
//! each level from the replicated previous solution, fine-grains once
//! `‖W^t − W^{t−1}‖ ≤ C0·d/(α(1−α))`, and applies the fixed-resolution stop
//! on the last level. Cost is iterations times cells.

use std::f64::consts::PI;

use mrtl_core::{Error, Result};
use serde::{Deserialize, Serialize};

const MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub alpha: f64,
    pub eps: f64,
    /// `‖F(0)‖ = 2C` at the finest resolution.
    pub c: f64,
    /// Discretization constant of the fine-graining rule.
    pub c0: f64,
    /// Coarsest cell width.
    pub d0: f64,
}

impl TheoryConfig {
    pub fn new(alpha: f64, eps: f64) -> Self {
        Self { alpha, eps, c: 1.0, c0: 0.5, d0: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.c > 0.0 && self.c0 > 0.0 && self.d0 > 0.0 && self.d0 <= 1.0) {
            return Err(Error::InvalidConfig("c and c0 must be positive and d0 in (0, 1]".into()));
        }
        let cells = 1.0 / self.d0;
        if (cells - cells.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("1/d0 must be an integer, got {cells}")));
        }
        Ok(())
    }

    /// Termination resolution `(1−α)²ε`.
    pub fn d_target(&self) -> f64 {
        (1.0 - self.alpha).powi(2) * self.eps
    }

    /// `(1/|ln α|)·ln(2C/((1−α)ε))`.
    pub fn predicted_fixed_iterations(&self) -> f64 {
        (2.0 * self.c / ((1.0 - self.alpha) * self.eps)).ln() / self.alpha.ln().abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level: usize,
    pub d: f64,
    pub cells: usize,
    pub iterations: usize,
    /// Started from the previous level's solution rather than zero.
    pub warm_started: bool,
    /// Step-norm threshold that ended the level.
    pub threshold: f64,
    pub last_step_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryResult {
    pub config: TheoryConfig,
    pub d_final: f64,
    pub levels: Vec<LevelRecord>,
    pub fixed_iterations: usize,
    pub predicted_fixed_iterations: f64,
    /// Measured over predicted fixed-resolution iterations.
    pub fixed_ratio: f64,
    /// `max t(d)·|ln α|` over warm-started levels.
    pub c_prime: f64,
    /// Max over min of `t(d)` across warm-started levels.
    pub level_ratio: f64,
    pub fixed_cost: f64,
    pub multi_cost: f64,
    /// Fixed over multi-resolution cost.
    pub cost_ratio: f64,
    /// `ln(1/((1−α)ε))`.
    pub log_factor: f64,
    /// `‖W − w*‖` at the finest resolution after each run.
    pub fixed_error: f64,
    pub multi_error: f64,
}

impl TheoryResult {
    pub fn fixed_within_factor(&self, f: f64) -> bool {
        self.fixed_ratio <= f && self.fixed_ratio >= 1.0 / f
    }
}

/// Unscaled target `1 + sin 2πx + ½ cos 6πx` averaged over each cell.
fn cell_averages(cells: usize) -> Vec<f64> {
    let d = 1.0 / cells as f64;
    let prim = |x: f64| x - (2.0 * PI * x).cos() / (2.0 * PI) + 0.5 * (6.0 * PI * x).sin() / (6.0 * PI);
    (0..cells).map(|i| (prim((i + 1) as f64 * d) - prim(i as f64 * d)) / d).collect()
}

fn norm_d(v: &[f64], d: f64) -> f64 {
    (d * v.iter().map(|x| x * x).sum::<f64>()).sqrt()
}

fn diff_norm_d(a: &[f64], b: &[f64], d: f64) -> f64 {
    (d * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sqrt()
}

/// Iterates `F_d` from `w` until the step norm is at most `threshold`.
/// Returns the iteration count and the last step norm.
fn iterate(w: &mut [f64], target: &[f64], alpha: f64, d: f64, threshold: f64) -> Result<(usize, f64)> {
    let lam = 1.0 - alpha;
    for t in 1..=MAX_ITERS {
        let mut sq = 0.0;
        for (x, y) in w.iter_mut().zip(target) {
            let step = -lam * (*x - y);
            *x += step;
            sq += step * step;
        }
        let norm = (d * sq).sqrt();
        if norm <= threshold {
            return Ok((t, norm));
        }
    }
    Err(Error::InvalidConfig(format!("no convergence within {MAX_ITERS} iterations")))
}

pub fn theory_check(alpha: f64, eps: f64) -> Result<TheoryResult> {
    theory_check_with(TheoryConfig::new(alpha, eps))
}

pub fn theory_check_with(cfg: TheoryConfig) -> Result<TheoryResult> {
    cfg.validate()?;
    let alpha = cfg.alpha;
    let mut ds = vec![cfg.d0];
    while *ds.last().expect("non-empty") > cfg.d_target() {
        let d = ds.last().expect("non-empty") / 2.0;
        ds.push(d);
    }
    let d_final = *ds.last().expect("non-empty");
    let cells_final = (1.0 / d_final).round() as usize;
    let scale = 2.0 * cfg.c / ((1.0 - alpha) * norm_d(&cell_averages(cells_final), d_final));
    let target = |cells: usize| -> Vec<f64> { cell_averages(cells).into_iter().map(|v| v * scale).collect() };
    let stop_final = cfg.eps * (1.0 - alpha) / (2.0 * alpha);

    let w_final = target(cells_final);
    let mut fixed = vec![0.0; cells_final];
    let (fixed_iterations, _) = iterate(&mut fixed, &w_final, alpha, d_final, stop_final)?;

    let mut levels = Vec::with_capacity(ds.len());
    let mut w: Vec<f64> = Vec::new();
    for (k, &d) in ds.iter().enumerate() {
        let cells = (1.0 / d).round() as usize;
        w = if k == 0 { vec![0.0; cells] } else { w.iter().flat_map(|&v| [v, v]).collect() };
        let last = k + 1 == ds.len();
        let threshold = if last { stop_final } else { cfg.c0 * d / (alpha * (1.0 - alpha)) };
        let (iterations, last_step_norm) = iterate(&mut w, &target(cells), alpha, d, threshold)?;
        levels.push(LevelRecord { level: k, d, cells, iterations, warm_started: k > 0, threshold, last_step_norm });
    }

    let warm: Vec<usize> = levels.iter().filter(|l| l.warm_started).map(|l| l.iterations).collect();
    let (tmax, tmin) = match (warm.iter().max(), warm.iter().min()) {
        (Some(&a), Some(&b)) => (a as f64, b as f64),
        _ => (levels[0].iterations as f64, levels[0].iterations as f64),
    };
    let fixed_cost = (fixed_iterations * cells_final) as f64;
    let multi_cost: f64 = levels.iter().map(|l| (l.iterations * l.cells) as f64).sum();
    let predicted = cfg.predicted_fixed_iterations();
    Ok(TheoryResult {
        config: cfg,
        d_final,
        fixed_iterations,
        predicted_fixed_iterations: predicted,
        fixed_ratio: fixed_iterations as f64 / predicted,
        c_prime: tmax * alpha.ln().abs(),
        level_ratio: tmax / tmin,
        fixed_cost,
        multi_cost,
        cost_ratio: fixed_cost / multi_cost,
        log_factor: (1.0 / ((1.0 - alpha) * cfg.eps)).ln(),
        fixed_error: diff_norm_d(&fixed, &w_final, d_final),
        multi_error: diff_norm_d(&w, &w_final, d_final),
        levels,
    })
}

/// Every (α, ε) combination, α-major.
pub fn theory_sweep(alphas: &[f64], epss: &[f64]) -> Result<Vec<TheoryResult>> {
    alphas.iter().flat_map(|&a| epss.iter().map(move |&e| theory_check(a, e))).collect()
}

/// Whether the cost ratio strictly increases with the log factor among
/// results sharing `alpha`.
pub fn cost_ratio_increasing(results: &[TheoryResult], alpha: f64) -> bool {
    let mut r: Vec<&TheoryResult> = results.iter().filter(|r| r.config.alpha == alpha).collect();
    r.sort_by(|a, b| a.log_factor.total_cmp(&b.log_factor));
    r.len() >= 2 && r.windows(2).all(|w| w[1].cost_ratio > w[0].cost_ratio)
}
