//! Raw spatial datasets: synthetic generation with planted factors,
//! JSON-lines ingestion, and encoding into model examples at a given pair
//! of grids.
//!
//! File format: line 1 is `{"meta": {...}}`, every further line is one
//! record `{"p": [x, y], "ctx": [[x, y], ...], "y": [-1, 1, ...], "mask": [true, ...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Point};
use crate::model::{sigmoid, Example, FactoredModel, SpatialModel};
use crate::tensor::{CpFactors, Mat};

/// Axis-aligned extent `[x0, y0, x1, y1]`, half-open on the upper side.
pub type Extent = [f64; 4];

pub fn grid_extent(g: &Grid) -> Extent {
    let hi = g.max_corner();
    [g.origin[0], g.origin[1], hi[0], hi[1]]
}

fn inside(e: &Extent, p: Point) -> bool {
    p[0] >= e[0] && p[0] < e[2] && p[1] >= e[1] && p[1] < e[3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_tasks: usize,
    pub primary_extent: Extent,
    pub context_extent: Extent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    /// Primary (ballhandler-like) position.
    pub p: Point,
    /// Context positions.
    pub ctx: Vec<Point>,
    /// `+1` / `-1` per task; `0` allowed only where the mask is false.
    pub y: Vec<i8>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub meta: DatasetMeta,
    pub records: Vec<Record>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn validate_record(&self, r: &Record) -> std::result::Result<(), String> {
        let n = self.meta.n_tasks;
        if r.y.len() != n || r.mask.len() != n {
            return Err(format!("expected {n} labels and mask entries, got {} / {}", r.y.len(), r.mask.len()));
        }
        for (a, (&y, &m)) in r.y.iter().zip(&r.mask).enumerate() {
            let ok = y == 1 || y == -1 || (y == 0 && !m);
            if !ok {
                return Err(format!("label {y} for task {a} must be -1 or +1"));
            }
        }
        if !inside(&self.meta.primary_extent, r.p) {
            return Err(format!("primary position {:?} outside extent", r.p));
        }
        if let Some(q) = r.ctx.iter().find(|&&q| !inside(&self.meta.context_extent, q)) {
            return Err(format!("context position {q:?} outside extent"));
        }
        Ok(())
    }

    /// Deterministic shuffle-and-split; the first part gets
    /// `1 - val_frac` of the records.
    pub fn split(&self, val_frac: f64, seed: u64) -> (RawDataset, RawDataset) {
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.records.len() as f64 * val_frac).round() as usize;
        let take = |ids: &[usize]| RawDataset {
            meta: self.meta.clone(),
            records: ids.iter().map(|&i| self.records[i].clone()).collect(),
        };
        let (val, train) = idx.split_at(n_val);
        (take(train), take(val))
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: DatasetMeta,
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<RawDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut ds: Option<RawDataset> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match ds.as_mut() {
            None => {
                let m: MetaLine = serde_json::from_str(&line)
                    .map_err(|e| Error::Parse { line: lineno, msg: format!("meta header: {e}") })?;
                ds = Some(RawDataset { meta: m.meta, records: Vec::new() });
            }
            Some(ds) => {
                let r: Record =
                    serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
                ds.validate_record(&r).map_err(|msg| Error::Parse { line: lineno, msg })?;
                ds.records.push(r);
            }
        }
    }
    Ok(ds.unwrap_or(RawDataset {
        meta: DatasetMeta { n_tasks: 0, primary_extent: [0.0; 4], context_extent: [0.0; 4] },
        records: Vec::new(),
    }))
}

pub fn write_jsonl(ds: &RawDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &MetaLine { meta: ds.meta.clone() })?;
    w.write_all(b"\n")?;
    for r in &ds.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Encodes every record: `phi` one-hot from the primary position, `psi`
/// occupancy of the context positions (duplicates within a cell collapse).
pub fn encode_at(ds: &RawDataset, grid_b: &Grid, grid_c: &Grid) -> Result<Vec<Example>> {
    ds.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let oob = |_| Error::RecordOutOfBounds { record: i };
            let phi = grid_b.encode_position(r.p).map_err(oob)?;
            let psi = grid_c.encode_occupancy(&r.ctx).map_err(oob)?;
            Ok(Example { phi, psi, labels: r.y.iter().map(|&y| f64::from(y)).collect(), task_mask: r.mask.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    /// Finest primary grid; also the primary extent.
    pub grid_b: Grid,
    /// Finest context grid; also the context extent.
    pub grid_c: Grid,
    pub dense_rank: usize,
    pub sparse_rank: usize,
    /// Standard deviation of the task loadings of the dense part.
    #[serde(default = "default_task_scale")]
    pub task_scale: f64,
    /// Nonzero cells per sparse spatial column.
    #[serde(default = "default_sparse_cells")]
    pub sparse_cells: usize,
    #[serde(default = "default_sparse_magnitude")]
    pub sparse_magnitude: f64,
    #[serde(default)]
    pub bias: f64,
    pub n_samples: usize,
    /// Context positions per record.
    #[serde(default = "default_n_context")]
    pub n_context: usize,
    pub label_noise: f64,
    pub seed: u64,
}

fn default_task_scale() -> f64 {
    1.5
}
fn default_sparse_cells() -> usize {
    3
}
fn default_sparse_magnitude() -> f64 {
    2.0
}
fn default_n_context() -> usize {
    1
}

impl SyntheticSpec {
    /// The desk-scale benchmark: 8 tasks, 32x32 primary and 8x8 context
    /// grids, rank 2 + 2, 50k samples, 10% label noise.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            n_tasks: 8,
            grid_b: Grid::new(32, 32, 1.0, [0.0, 0.0]).expect("valid"),
            grid_c: Grid::new(8, 8, 1.0, [0.0, 0.0]).expect("valid"),
            dense_rank: 2,
            sparse_rank: 2,
            task_scale: default_task_scale(),
            sparse_cells: default_sparse_cells(),
            sparse_magnitude: default_sparse_magnitude(),
            bias: 0.0,
            n_samples: 50_000,
            n_context: default_n_context(),
            label_noise: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_tasks == 0 {
            return bad("n_tasks must be >= 1".into());
        }
        if self.dense_rank == 0 || self.sparse_rank == 0 {
            return bad("ranks must be >= 1".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label_noise must be in [0, 0.5), got {}", self.label_noise));
        }
        if self.n_context == 0 {
            return bad("n_context must be >= 1".into());
        }
        if self.sparse_cells == 0 || self.sparse_cells > self.grid_b.cell_count().min(self.grid_c.cell_count()) {
            return bad(format!("sparse_cells {} does not fit the grids", self.sparse_cells));
        }
        for (name, v) in
            [("task_scale", self.task_scale), ("sparse_magnitude", self.sparse_magnitude), ("bias", self.bias)]
        {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

/// Bilinear upsampling of a `4x4` white-noise field to `rows x cols`,
/// scaled to unit RMS.
fn smooth_field<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    const N: usize = 4;
    let noise: Vec<f64> = (0..N * N).map(|_| rng.sample(StandardNormal)).collect();
    let sample = |u: f64, v: f64| {
        // node coordinates: cell centers of the 4x4 field
        let x = (u * N as f64 - 0.5).clamp(0.0, (N - 1) as f64);
        let y = (v * N as f64 - 0.5).clamp(0.0, (N - 1) as f64);
        let (x0, y0) = ((x.floor() as usize).min(N - 2), (y.floor() as usize).min(N - 2));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |r: usize, c: usize| noise[r * N + c];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(sample((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64));
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

fn peaky_column<R: Rng>(n: usize, s: usize, magnitude: f64, rng: &mut R) -> Vec<f64> {
    let mut col = vec![0.0; n];
    let mut cells: Vec<usize> = (0..n).collect();
    cells.shuffle(rng);
    for &i in &cells[..s] {
        col[i] = if rng.random_bool(0.5) { magnitude } else { -magnitude };
    }
    col
}

fn columns_to_mat(cols: Vec<Vec<f64>>, rows: usize) -> Mat {
    Mat::from_fn(rows, cols.len(), |r, k| cols[k][r])
}

/// The planted low-rank + sparse model described by `spec`.
pub fn ground_truth(spec: &SyntheticSpec) -> Result<FactoredModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (gb, gc) = (spec.grid_b, spec.grid_c);
    let (mb, mc) = (gb.cell_count(), gc.cell_count());
    let na = spec.n_tasks;

    let kd = spec.dense_rank;
    let a = Mat::from_fn(na, kd, |_, _| spec.task_scale * rng.sample::<f64, _>(StandardNormal));
    let b = columns_to_mat((0..kd).map(|_| smooth_field(gb.rows, gb.cols, &mut rng)).collect(), mb);
    let c = columns_to_mat((0..kd).map(|_| smooth_field(gc.rows, gc.cols, &mut rng)).collect(), mc);

    let ks = spec.sparse_rank;
    let u = Mat::from_fn(na, ks, |_, _| rng.sample::<f64, _>(StandardNormal));
    let v = columns_to_mat(
        (0..ks).map(|_| peaky_column(mb, spec.sparse_cells, spec.sparse_magnitude, &mut rng)).collect(),
        mb,
    );
    let w = columns_to_mat(
        (0..ks).map(|_| peaky_column(mc, spec.sparse_cells, spec.sparse_magnitude, &mut rng)).collect(),
        mc,
    );
    FactoredModel::new(CpFactors::new(a, b, c)?, CpFactors::new(u, v, w)?, vec![spec.bias; na], gb, gc)
}

/// Samples a dataset from the planted model. Positions are uniform over
/// each extent; `y = +1` with probability `sigmoid(logit)`, then each label
/// flips independently with probability `label_noise`.
pub fn generate(spec: &SyntheticSpec) -> Result<(RawDataset, FactoredModel)> {
    let truth = ground_truth(spec)?;
    // separate stream so the factors do not depend on n_samples
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_da7a);
    let ext_b = grid_extent(&spec.grid_b);
    let ext_c = grid_extent(&spec.grid_c);
    let draw =
        |rng: &mut ChaCha8Rng, e: &Extent| -> Point { [rng.random_range(e[0]..e[2]), rng.random_range(e[1]..e[3])] };
    let mut records = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let p = draw(&mut rng, &ext_b);
        let ctx: Vec<Point> = (0..spec.n_context).map(|_| draw(&mut rng, &ext_c)).collect();
        let e = Example {
            phi: spec.grid_b.encode_position(p)?,
            psi: spec.grid_c.encode_occupancy(&ctx)?,
            labels: vec![1.0; spec.n_tasks],
            task_mask: vec![true; spec.n_tasks],
        };
        let y = truth
            .forward(&e)?
            .into_iter()
            .map(|z| {
                let pos = rng.random_bool(sigmoid(z));
                let flip = spec.label_noise > 0.0 && rng.random_bool(spec.label_noise);
                if pos != flip {
                    1
                } else {
                    -1
                }
            })
            .collect();
        records.push(Record { p, ctx, y, mask: vec![true; spec.n_tasks] });
    }
    let meta = DatasetMeta { n_tasks: spec.n_tasks, primary_extent: ext_b, context_extent: ext_c };
    Ok((RawDataset { meta, records }, truth))
}
