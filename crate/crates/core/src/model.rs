//! Forward pass, logistic loss and exact gradients for the full-rank tensor
//! model and the factored low-rank + sparse model.
//!
//! Both models map an example with primary features `phi` (over the cells of
//! `grid_b`) and context features `psi` (over `grid_c`) to one logit per
//! task:
//!
//! ```text
//! full:      logit_a = sum_bc W_abc phi_b psi_c + bias_a
//! factored:  logit_a = sum_k A_ak (B_k . phi)(C_k . psi)
//!                    + sum_k Us_ak (Vs_k . phi)(Ws_k . psi) + bias_a
//! ```
//!
//! Probabilities use the logistic link. The loss is the mean of
//! `-log sigmoid(y_a * logit_a)` over observed (example, task) pairs, plus
//! L2 on the dense parameters and L1 on the sparse factors. Biases are never
//! regularized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureVector, Grid};
use crate::tensor::{cp_reconstruct, CpFactors, DenseTensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub phi: FeatureVector,
    pub psi: FeatureVector,
    /// `+1.0` / `-1.0` per task; ignored where `task_mask` is false.
    pub labels: Vec<f64>,
    pub task_mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub l2_dense: f64,
    pub l1_sparse: f64,
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l2_dense", self.l2_dense), ("l1_sparse", self.l1_sparse)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which spatial mode a set of gradient aggregates refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    /// Primary (`phi`, `grid_b`) mode.
    B,
    /// Context (`psi`, `grid_c`) mode.
    C,
}

/// Gradient blocks, in the same order as [`SpatialModel::blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros_like(blocks: &[&[f64]]) -> Self {
        Self { blocks: blocks.iter().map(|b| vec![0.0; b.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (x, y) in self.blocks.iter_mut().zip(&other.blocks) {
            for (p, q) in x.iter_mut().zip(y) {
                *p += q;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            for v in b.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Unnormalized data term of the loss over a batch.
#[derive(Debug, Clone)]
pub struct DataTerms {
    pub loss_sum: f64,
    pub grad_sum: Gradient,
    pub observed: usize,
}

pub trait SpatialModel {
    fn n_tasks(&self) -> usize;
    fn grid_b(&self) -> Grid;
    fn grid_c(&self) -> Grid;
    fn forward(&self, e: &Example) -> Result<Vec<f64>>;
    /// Summed loss and gradient of the data term, without regularization.
    fn data_terms(&self, batch: &[Example]) -> Result<DataTerms>;
    /// Adds the regularizer value and gradient.
    fn add_regularization(&self, reg: &RegConfig, grad: &mut Gradient) -> f64;
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;
    fn block_names(&self) -> Vec<&'static str>;
    /// Per-cell scalar summary of `grad` along a spatial mode: the mean of
    /// the gradient entries over all non-spatial indices mapped to the cell.
    fn cell_aggregates(&self, grad: &Gradient, mode: SpatialMode) -> Vec<f64>;
    /// Every regularized (non-bias) gradient entry, flattened.
    fn weight_gradients(&self, grad: &Gradient) -> Vec<f64>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn loss_and_grad(&self, batch: &[Example], reg: &RegConfig) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let terms = self.data_terms(batch)?;
        Ok(finish_loss(self, terms, reg))
    }

    fn predict_prob(&self, e: &Example) -> Result<Vec<f64>> {
        Ok(self.forward(e)?.into_iter().map(sigmoid).collect())
    }

    /// Mean cross-entropy over observed pairs, no regularization.
    fn mean_log_loss(&self, data: &[Example]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for e in data {
            let logits = self.forward(e)?;
            for ((z, &y), &m) in logits.iter().zip(&e.labels).zip(&e.task_mask) {
                if m {
                    sum += softplus(-y * z);
                    n += 1;
                }
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

fn finish_loss<M: SpatialModel + ?Sized>(m: &M, terms: DataTerms, reg: &RegConfig) -> (f64, Gradient) {
    let DataTerms { loss_sum, mut grad_sum, observed } = terms;
    let mut loss = 0.0;
    if observed > 0 {
        let inv = 1.0 / observed as f64;
        grad_sum.scale(inv);
        loss = loss_sum * inv;
    }
    loss += m.add_regularization(reg, &mut grad_sum);
    (loss, grad_sum)
}

/// Loss and gradient with the batch split into `shards` contiguous pieces
/// evaluated on separate threads. Shard results are summed in shard order,
/// so the output is bitwise reproducible for a fixed shard count.
pub fn loss_and_grad_sharded<M: SpatialModel + Sync>(
    m: &M,
    batch: &[Example],
    reg: &RegConfig,
    shards: usize,
) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let shards = shards.clamp(1, batch.len());
    if shards == 1 {
        return m.loss_and_grad(batch, reg);
    }
    let chunk = batch.len().div_ceil(shards);
    let parts: Vec<Result<DataTerms>> = std::thread::scope(|s| {
        let handles: Vec<_> = batch.chunks(chunk).map(|piece| s.spawn(move || m.data_terms(piece))).collect();
        handles.into_iter().map(|h| h.join().expect("shard worker panicked")).collect()
    });
    let mut total: Option<DataTerms> = None;
    for part in parts {
        let part = part?;
        match total.as_mut() {
            None => total = Some(part),
            Some(t) => {
                t.loss_sum += part.loss_sum;
                t.grad_sum.add_assign(&part.grad_sum);
                t.observed += part.observed;
            }
        }
    }
    Ok(finish_loss(m, total.expect("at least one shard"), reg))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Subgradient of `|x|` with 0 at the kink.
#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_example(e: &Example, n_tasks: usize, mb: usize, mc: usize) -> Result<()> {
    if e.phi.dim != mb || e.psi.dim != mc {
        return Err(Error::DimensionMismatch(format!(
            "example features ({}, {}) vs model cells ({mb}, {mc})",
            e.phi.dim, e.psi.dim
        )));
    }
    if e.labels.len() != n_tasks || e.task_mask.len() != n_tasks {
        return Err(Error::DimensionMismatch(format!(
            "example has {} labels / {} mask entries, model has {n_tasks} tasks",
            e.labels.len(),
            e.task_mask.len()
        )));
    }
    if e.phi.indices.iter().any(|&i| i >= mb) || e.psi.indices.iter().any(|&i| i >= mc) {
        return Err(Error::DimensionMismatch("feature index beyond grid".into()));
    }
    Ok(())
}

/// Adds `-y sigmoid(-y z)` for each observed task to `g` and returns the
/// summed loss and observed count.
fn logistic_terms(logits: &[f64], e: &Example, g: &mut [f64]) -> (f64, usize) {
    let mut loss = 0.0;
    let mut n = 0;
    for (a, ((&z, &y), &m)) in logits.iter().zip(&e.labels).zip(&e.task_mask).enumerate() {
        if m {
            loss += softplus(-y * z);
            g[a] = -y * sigmoid(-y * z);
            n += 1;
        } else {
            g[a] = 0.0;
        }
    }
    (loss, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullTensorModel {
    pub weights: DenseTensor3,
    pub bias: Vec<f64>,
    pub grid_b: Grid,
    pub grid_c: Grid,
}

impl FullTensorModel {
    pub fn zeros(n_tasks: usize, grid_b: Grid, grid_c: Grid) -> Self {
        Self {
            weights: DenseTensor3::zeros((n_tasks, grid_b.cell_count(), grid_c.cell_count())),
            bias: vec![0.0; n_tasks],
            grid_b,
            grid_c,
        }
    }

    pub fn new(weights: DenseTensor3, bias: Vec<f64>, grid_b: Grid, grid_c: Grid) -> Result<Self> {
        let (na, mb, mc) = weights.dims;
        if mb != grid_b.cell_count() || mc != grid_c.cell_count() {
            return Err(Error::DimensionMismatch(format!(
                "tensor dims {:?} vs grids ({}, {})",
                weights.dims,
                grid_b.cell_count(),
                grid_c.cell_count()
            )));
        }
        if bias.len() != na {
            return Err(Error::LengthMismatch { expected: na, got: bias.len() });
        }
        if !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidDimension("bias must be finite".into()));
        }
        Ok(Self { weights, bias, grid_b, grid_c })
    }
}

impl SpatialModel for FullTensorModel {
    fn n_tasks(&self) -> usize {
        self.weights.dims.0
    }

    fn grid_b(&self) -> Grid {
        self.grid_b
    }

    fn grid_c(&self) -> Grid {
        self.grid_c
    }

    fn forward(&self, e: &Example) -> Result<Vec<f64>> {
        let (na, mb, mc) = self.weights.dims;
        check_example(e, na, mb, mc)?;
        let mut out = self.bias.clone();
        for (a, o) in out.iter_mut().enumerate() {
            for (b, pb) in e.phi.iter() {
                for (c, pc) in e.psi.iter() {
                    *o += self.weights.get(a, b, c) * pb * pc;
                }
            }
        }
        Ok(out)
    }

    fn data_terms(&self, batch: &[Example]) -> Result<DataTerms> {
        let (na, _, _) = self.weights.dims;
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = vec![0.0; na];
        let mut g = vec![0.0; na];
        let mut loss_sum = 0.0;
        let mut observed = 0;
        for e in batch {
            let logits = self.forward(e)?;
            let (l, n) = logistic_terms(&logits, e, &mut g);
            loss_sum += l;
            observed += n;
            for a in 0..na {
                if g[a] == 0.0 {
                    continue;
                }
                gb[a] += g[a];
                for (b, pb) in e.phi.iter() {
                    for (c, pc) in e.psi.iter() {
                        gw[self.weights.offset(a, b, c)] += g[a] * pb * pc;
                    }
                }
            }
        }
        Ok(DataTerms { loss_sum, grad_sum: Gradient { blocks: vec![gw, gb] }, observed })
    }

    fn add_regularization(&self, reg: &RegConfig, grad: &mut Gradient) -> f64 {
        if reg.l2_dense == 0.0 {
            return 0.0;
        }
        let mut pen = 0.0;
        for (gv, &w) in grad.blocks[0].iter_mut().zip(&self.weights.values) {
            pen += w * w;
            *gv += 2.0 * reg.l2_dense * w;
        }
        reg.l2_dense * pen
    }

    fn blocks(&self) -> Vec<&[f64]> {
        vec![&self.weights.values, &self.bias]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights.values, &mut self.bias]
    }

    fn block_names(&self) -> Vec<&'static str> {
        vec!["W", "bias"]
    }

    fn cell_aggregates(&self, grad: &Gradient, mode: SpatialMode) -> Vec<f64> {
        let (na, mb, mc) = self.weights.dims;
        let gw = &grad.blocks[0];
        match mode {
            SpatialMode::B => {
                let mut out = vec![0.0; mb];
                for a in 0..na {
                    for (b, o) in out.iter_mut().enumerate() {
                        let base = (a * mb + b) * mc;
                        *o += gw[base..base + mc].iter().sum::<f64>();
                    }
                }
                let denom = (na * mc) as f64;
                out.iter_mut().for_each(|v| *v /= denom);
                out
            }
            SpatialMode::C => {
                let mut out = vec![0.0; mc];
                for a in 0..na {
                    for b in 0..mb {
                        let base = (a * mb + b) * mc;
                        for (o, g) in out.iter_mut().zip(&gw[base..base + mc]) {
                            *o += g;
                        }
                    }
                }
                let denom = (na * mb) as f64;
                out.iter_mut().for_each(|v| *v /= denom);
                out
            }
        }
    }

    fn weight_gradients(&self, grad: &Gradient) -> Vec<f64> {
        grad.blocks[0].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredModel {
    /// Low-rank part, L2-regularized.
    pub dense: CpFactors,
    /// Sparse part (`Us`, `Vs`, `Ws`), L1-regularized.
    pub sparse: CpFactors,
    pub bias: Vec<f64>,
    pub grid_b: Grid,
    pub grid_c: Grid,
}

impl FactoredModel {
    pub fn new(dense: CpFactors, sparse: CpFactors, bias: Vec<f64>, grid_b: Grid, grid_c: Grid) -> Result<Self> {
        let dims = dense.dims();
        if sparse.dims() != dims {
            return Err(Error::DimensionMismatch(format!("dense dims {:?} vs sparse dims {:?}", dims, sparse.dims())));
        }
        if dims.1 != grid_b.cell_count() || dims.2 != grid_c.cell_count() {
            return Err(Error::DimensionMismatch(format!(
                "factor dims {:?} vs grids ({}, {})",
                dims,
                grid_b.cell_count(),
                grid_c.cell_count()
            )));
        }
        if bias.len() != dims.0 {
            return Err(Error::LengthMismatch { expected: dims.0, got: bias.len() });
        }
        if !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidDimension("bias must be finite".into()));
        }
        Ok(Self { dense, sparse, bias, grid_b, grid_c })
    }

    /// Materializes `W^L + W^S` as a full-rank model with the same bias.
    pub fn to_full(&self) -> FullTensorModel {
        let w = cp_reconstruct(&self.dense).add(&cp_reconstruct(&self.sparse)).expect("dense and sparse dims agree");
        FullTensorModel { weights: w, bias: self.bias.clone(), grid_b: self.grid_b, grid_c: self.grid_c }
    }

    /// Projections `(B_k . phi, C_k . psi)` for each component of `f`.
    fn projections(f: &CpFactors, e: &Example) -> (Vec<f64>, Vec<f64>) {
        let k = f.rank();
        let mut beta = vec![0.0; k];
        let mut gamma = vec![0.0; k];
        for (b, v) in e.phi.iter() {
            for (x, w) in beta.iter_mut().zip(f.b.row(b)) {
                *x += w * v;
            }
        }
        for (c, v) in e.psi.iter() {
            for (x, w) in gamma.iter_mut().zip(f.c.row(c)) {
                *x += w * v;
            }
        }
        (beta, gamma)
    }

    fn accumulate(f: &CpFactors, e: &Example, out: &mut [f64]) {
        let (beta, gamma) = Self::projections(f, e);
        for (a, o) in out.iter_mut().enumerate() {
            let row = f.a.row(a);
            for k in 0..f.rank() {
                *o += row[k] * beta[k] * gamma[k];
            }
        }
    }

    /// Adds the gradient of `sum_a g_a logit_a` w.r.t. the factors of `f`.
    fn backprop(f: &CpFactors, e: &Example, g: &[f64], ga: &mut [f64], gb: &mut [f64], gc: &mut [f64]) {
        let k = f.rank();
        let (beta, gamma) = Self::projections(f, e);
        let mut s = vec![0.0; k];
        for (a, &ga_) in g.iter().enumerate() {
            if ga_ == 0.0 {
                continue;
            }
            let row = f.a.row(a);
            for j in 0..k {
                ga[a * k + j] += ga_ * beta[j] * gamma[j];
                s[j] += ga_ * row[j];
            }
        }
        for (b, v) in e.phi.iter() {
            for j in 0..k {
                gb[b * k + j] += v * s[j] * gamma[j];
            }
        }
        for (c, v) in e.psi.iter() {
            for j in 0..k {
                gc[c * k + j] += v * s[j] * beta[j];
            }
        }
    }
}

impl SpatialModel for FactoredModel {
    fn n_tasks(&self) -> usize {
        self.bias.len()
    }

    fn grid_b(&self) -> Grid {
        self.grid_b
    }

    fn grid_c(&self) -> Grid {
        self.grid_c
    }

    fn forward(&self, e: &Example) -> Result<Vec<f64>> {
        let (na, mb, mc) = self.dense.dims();
        check_example(e, na, mb, mc)?;
        let mut out = self.bias.clone();
        Self::accumulate(&self.dense, e, &mut out);
        Self::accumulate(&self.sparse, e, &mut out);
        Ok(out)
    }

    fn data_terms(&self, batch: &[Example]) -> Result<DataTerms> {
        let na = self.n_tasks();
        let mut grads: Vec<Vec<f64>> = self.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        let mut g = vec![0.0; na];
        let mut loss_sum = 0.0;
        let mut observed = 0;
        for e in batch {
            let logits = self.forward(e)?;
            let (l, n) = logistic_terms(&logits, e, &mut g);
            loss_sum += l;
            observed += n;
            let [ga, gb, gc, gu, gv, gw, gbias] = grads.as_mut_slice() else { unreachable!("seven parameter blocks") };
            Self::backprop(&self.dense, e, &g, ga, gb, gc);
            Self::backprop(&self.sparse, e, &g, gu, gv, gw);
            for (x, y) in gbias.iter_mut().zip(&g) {
                *x += y;
            }
        }
        Ok(DataTerms { loss_sum, grad_sum: Gradient { blocks: grads }, observed })
    }

    fn add_regularization(&self, reg: &RegConfig, grad: &mut Gradient) -> f64 {
        let mut pen = 0.0;
        if reg.l2_dense != 0.0 {
            let mut sq = 0.0;
            for (i, m) in [&self.dense.a, &self.dense.b, &self.dense.c].into_iter().enumerate() {
                for (gv, &w) in grad.blocks[i].iter_mut().zip(&m.data) {
                    sq += w * w;
                    *gv += 2.0 * reg.l2_dense * w;
                }
            }
            pen += reg.l2_dense * sq;
        }
        if reg.l1_sparse != 0.0 {
            let mut abs = 0.0;
            for (i, m) in [&self.sparse.a, &self.sparse.b, &self.sparse.c].into_iter().enumerate() {
                for (gv, &w) in grad.blocks[3 + i].iter_mut().zip(&m.data) {
                    abs += w.abs();
                    *gv += reg.l1_sparse * sign0(w);
                }
            }
            pen += reg.l1_sparse * abs;
        }
        pen
    }

    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.dense.a.data,
            &self.dense.b.data,
            &self.dense.c.data,
            &self.sparse.a.data,
            &self.sparse.b.data,
            &self.sparse.c.data,
            &self.bias,
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.dense.a.data,
            &mut self.dense.b.data,
            &mut self.dense.c.data,
            &mut self.sparse.a.data,
            &mut self.sparse.b.data,
            &mut self.sparse.c.data,
            &mut self.bias,
        ]
    }

    fn block_names(&self) -> Vec<&'static str> {
        vec!["A", "B", "C", "Us", "Vs", "Ws", "bias"]
    }

    fn cell_aggregates(&self, grad: &Gradient, mode: SpatialMode) -> Vec<f64> {
        let (kd, ks) = (self.dense.rank(), self.sparse.rank());
        let (dense_block, sparse_block, cells) = match mode {
            SpatialMode::B => (&grad.blocks[1], &grad.blocks[4], self.grid_b.cell_count()),
            SpatialMode::C => (&grad.blocks[2], &grad.blocks[5], self.grid_c.cell_count()),
        };
        let denom = (kd + ks) as f64;
        (0..cells)
            .map(|i| {
                let d: f64 = dense_block[i * kd..(i + 1) * kd].iter().sum();
                let s: f64 = sparse_block[i * ks..(i + 1) * ks].iter().sum();
                (d + s) / denom
            })
            .collect()
    }

    fn weight_gradients(&self, grad: &Gradient) -> Vec<f64> {
        grad.blocks[..6].iter().flatten().copied().collect()
    }
}

/// Either model kind, as carried through a multi-phase training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnyModel {
    Full(FullTensorModel),
    Factored(FactoredModel),
}

impl AnyModel {
    pub fn as_dyn(&self) -> &dyn SpatialModel {
        match self {
            AnyModel::Full(m) => m,
            AnyModel::Factored(m) => m,
        }
    }

    pub fn param_count(&self) -> usize {
        self.as_dyn().param_count()
    }
}
