//! One coarse cell split into two with opposite true weights.
//!
//! Positions are uniform on `[0, 2)`; the label logit is `+1` on the left
//! half and `-1` on the right. A single-cell model fit to this data sits at
//! the average weight, where its minibatch gradients cancel on average; after
//! replication into two cells each child's gradient has a consistent sign.

use mrtl_core::model::{SpatialMode, SpatialModel};
use mrtl_core::mrtl::finegrain_full;
use mrtl_core::{
    Error, Example, FeatureVector, FullTensorModel, GradStatsBuffer, Grid, GroupStats, RefinementMap, RegConfig, Result,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub truth: [f64; 2],
    pub n_samples: usize,
    pub batch_size: usize,
    /// Minibatch gradients tracked per phase.
    pub window: usize,
    pub bins: usize,
    /// Step size of the SGD steps taken while tracking.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            truth: [1.0, -1.0],
            n_samples: 4000,
            batch_size: 32,
            window: 500,
            bins: 20,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyResult {
    /// The single coarse cell, tracked after full-batch convergence.
    pub coarse: GroupStats,
    /// Both child cells, tracked right after fine-graining.
    pub fine: [GroupStats; 2],
}

fn example(mb: usize, cell: usize, label: f64) -> Example {
    Example {
        phi: FeatureVector::one_hot(mb, cell),
        psi: FeatureVector::one_hot(1, 0),
        labels: vec![label],
        task_mask: vec![true],
    }
}

/// Tracks `window` minibatch gradients while taking SGD steps.
fn track<R: Rng>(m: &mut FullTensorModel, data: &[Example], cfg: &ToyConfig, rng: &mut R) -> Result<Vec<GroupStats>> {
    let cells = m.grid_b.cell_count();
    let mut buf = GradStatsBuffer::new(cells, cfg.window, cfg.bins)?;
    let reg = RegConfig::default();
    for _ in 0..cfg.window {
        let batch: Vec<Example> = data.choose_multiple(rng, cfg.batch_size).cloned().collect();
        let (_, g) = m.loss_and_grad(&batch, &reg)?;
        buf.push(&m.cell_aggregates(&g, SpatialMode::B))?;
        for (p, d) in m.blocks_mut().into_iter().zip(&g.blocks) {
            p.iter_mut().zip(d).for_each(|(x, dx)| *x -= cfg.learning_rate * dx);
        }
    }
    (0..cells).map(|i| buf.group_stats(i)).collect()
}

pub fn gradient_disagreement(cfg: &ToyConfig) -> Result<ToyResult> {
    if cfg.batch_size == 0 || cfg.batch_size > cfg.n_samples {
        return Err(Error::InvalidConfig(format!("batch_size must be in 1..={}", cfg.n_samples)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coarse_b = Grid::new(1, 1, 2.0, [0.0, 0.0])?;
    let grid_c = Grid::new(1, 1, 2.0, [0.0, 0.0])?;
    let fine_b = Grid::new(1, 2, 1.0, [0.0, 0.0])?;
    let rm_b = RefinementMap::from_children(coarse_b, fine_b, vec![vec![0, 1]])?;
    let rm_c = RefinementMap::identity(grid_c);

    let cells: Vec<usize> = (0..cfg.n_samples).map(|_| rng.random_range(0..2)).collect();
    let labels: Vec<f64> = cells
        .iter()
        .map(|&k| {
            let p = 1.0 / (1.0 + (-cfg.truth[k]).exp());
            if rng.random_bool(p) {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    let coarse_data: Vec<Example> = labels.iter().map(|&y| example(1, 0, y)).collect();
    let fine_data: Vec<Example> = cells.iter().zip(&labels).map(|(&k, &y)| example(2, k, y)).collect();

    let mut coarse = FullTensorModel::zeros(1, coarse_b, grid_c);
    let reg = RegConfig::default();
    for _ in 0..10_000 {
        let (_, g) = coarse.loss_and_grad(&coarse_data, &reg)?;
        if g.norm() < 1e-12 {
            break;
        }
        for (p, d) in coarse.blocks_mut().into_iter().zip(&g.blocks) {
            p.iter_mut().zip(d).for_each(|(x, dx)| *x -= 2.0 * dx);
        }
    }
    let mut fine = finegrain_full(&coarse, &rm_b, &rm_c)?;
    let coarse_stats = track(&mut coarse, &coarse_data, cfg, &mut rng)?;
    let fine_stats = track(&mut fine, &fine_data, cfg, &mut rng)?;
    Ok(ToyResult { coarse: coarse_stats[0], fine: [fine_stats[0], fine_stats[1]] })
}
