//! Dense order-3 tensors, CP factor sets, and CP decomposition by
//! alternating least squares.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tikhonov term added to an ALS normal-equation Gram that is not
/// numerically positive definite.
pub const ALS_JITTER: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn column_norm(&self, c: usize) -> f64 {
        (0..self.rows).map(|r| self.get(r, c).powi(2)).sum::<f64>().sqrt()
    }

    /// `selfᵀ self`, a `cols x cols` matrix.
    pub fn gram(&self) -> Mat {
        let k = self.cols;
        let mut g = Mat::zeros(k, k);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..k {
                for j in 0..k {
                    g.data[i * k + j] += row[i] * row[j];
                }
            }
        }
        g
    }

    pub fn scale_column(&mut self, c: usize, s: f64) {
        for r in 0..self.rows {
            self.data[r * self.cols + c] *= s;
        }
    }

    /// Keeps the listed columns, in the listed order.
    pub fn select_columns(&self, cols: &[usize]) -> Mat {
        Mat::from_fn(self.rows, cols.len(), |r, j| self.get(r, cols[j]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor3 {
    pub dims: (usize, usize, usize),
    pub values: Vec<f64>,
}

impl DenseTensor3 {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self { dims, values: vec![0.0; dims.0 * dims.1 * dims.2] }
    }

    pub fn from_vec(dims: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if values.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: values.len() });
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for a in 0..dims.0 {
            for b in 0..dims.1 {
                for c in 0..dims.2 {
                    values.push(f(a, b, c));
                }
            }
        }
        Self { dims, values }
    }

    #[inline]
    pub fn offset(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.dims.1 + b) * self.dims.2 + c
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.values[self.offset(a, b, c)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, v: f64) {
        let o = self.offset(a, b, c);
        self.values[o] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&self, other: &DenseTensor3) -> Result<DenseTensor3> {
        self.check_dims(other)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x + y).collect();
        Ok(DenseTensor3 { dims: self.dims, values })
    }

    pub fn distance(&self, other: &DenseTensor3) -> Result<f64> {
        self.check_dims(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
    }

    fn check_dims(&self, other: &DenseTensor3) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }
}

/// CP factor set: `W_abc = sum_k A_ak B_bk C_ck`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpFactors {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
}

impl CpFactors {
    pub fn new(a: Mat, b: Mat, c: Mat) -> Result<Self> {
        if a.cols != b.cols || a.cols != c.cols {
            return Err(Error::ShapeMismatch(format!("factor ranks differ: {} / {} / {}", a.cols, b.cols, c.cols)));
        }
        Ok(Self { a, b, c })
    }

    pub fn zeros(dims: (usize, usize, usize), rank: usize) -> Self {
        Self { a: Mat::zeros(dims.0, rank), b: Mat::zeros(dims.1, rank), c: Mat::zeros(dims.2, rank) }
    }

    /// Entries i.i.d. uniform on `[-scale, scale)`.
    pub fn random_uniform<R: Rng>(dims: (usize, usize, usize), rank: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = |n: usize| {
            let data = (0..n * rank).map(|_| rng.random_range(-scale..scale)).collect();
            Mat { rows: n, cols: rank, data }
        };
        let a = draw(dims.0);
        let b = draw(dims.1);
        let c = draw(dims.2);
        Self { a, b, c }
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.a.cols
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.rows, self.b.rows, self.c.rows)
    }

    pub fn param_count(&self) -> usize {
        self.a.data.len() + self.b.data.len() + self.c.data.len()
    }

    /// Norm of the rank-one component `k`.
    pub fn component_norm(&self, k: usize) -> f64 {
        self.a.column_norm(k) * self.b.column_norm(k) * self.c.column_norm(k)
    }

    /// Spreads each component's norm evenly over its three columns.
    /// The reconstruction is unchanged.
    pub fn balance(&mut self) {
        for k in 0..self.rank() {
            let na = self.a.column_norm(k);
            let nb = self.b.column_norm(k);
            let nc = self.c.column_norm(k);
            if na == 0.0 || nb == 0.0 || nc == 0.0 {
                continue;
            }
            let target = (na * nb * nc).cbrt();
            self.a.scale_column(k, target / na);
            self.b.scale_column(k, target / nb);
            self.c.scale_column(k, target / nc);
        }
    }

    pub fn select_components(&self, ks: &[usize]) -> CpFactors {
        CpFactors { a: self.a.select_columns(ks), b: self.b.select_columns(ks), c: self.c.select_columns(ks) }
    }

    /// Splits into the `first` largest-norm components and the rest.
    pub fn split_by_norm(&self, first: usize) -> Result<(CpFactors, CpFactors)> {
        if first > self.rank() {
            return Err(Error::ShapeMismatch(format!("cannot take {first} of {} components", self.rank())));
        }
        let mut order: Vec<usize> = (0..self.rank()).collect();
        let norms: Vec<f64> = order.iter().map(|&k| self.component_norm(k)).collect();
        // stable sort keeps index order among ties
        order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
        Ok((self.select_components(&order[..first]), self.select_components(&order[first..])))
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }
}

pub fn cp_reconstruct(f: &CpFactors) -> DenseTensor3 {
    let (na, mb, mc) = f.dims();
    let k = f.rank();
    let mut t = DenseTensor3::zeros((na, mb, mc));
    let mut ab = vec![0.0; k];
    for a in 0..na {
        let ra = f.a.row(a);
        for b in 0..mb {
            let rb = f.b.row(b);
            for j in 0..k {
                ab[j] = ra[j] * rb[j];
            }
            let base = (a * mb + b) * mc;
            for c in 0..mc {
                let rc = f.c.row(c);
                t.values[base + c] = ab.iter().zip(rc).map(|(x, y)| x * y).sum();
            }
        }
    }
    t
}

/// `‖t − cp_reconstruct(f)‖ / max(‖t‖, eps)`.
pub fn relative_residual(t: &DenseTensor3, f: &CpFactors) -> Result<f64> {
    if t.dims != f.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", t.dims, f.dims())));
    }
    let r = cp_reconstruct(f);
    Ok(t.distance(&r)? / t.frobenius_norm().max(f64::EPSILON))
}

#[derive(Debug, Clone)]
pub struct CpAlsResult {
    pub factors: CpFactors,
    /// `1 − ‖t − reconstruct‖ / ‖t‖`.
    pub fit: f64,
    pub sweeps: usize,
    /// Frobenius residual after each sweep.
    pub residual_trace: Vec<f64>,
}

/// CP decomposition by alternating least squares.
///
/// Each sweep solves the three mode-wise least-squares problems through their
/// normal equations (`ALS_JITTER` on the Gram diagonal when Cholesky
/// fails, LU as a last resort). Stops when the fit
/// changes by less than `tol` or after `max_iters` sweeps. A zero tensor
/// yields zero factors with fit 1.
pub fn cp_als(t: &DenseTensor3, rank: usize, max_iters: usize, tol: f64, seed: u64) -> Result<CpAlsResult> {
    if rank == 0 {
        return Err(Error::InvalidDimension("rank must be at least 1".into()));
    }
    if max_iters == 0 {
        return Err(Error::InvalidDimension("max_iters must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidDimension(format!("tol must be positive, got {tol}")));
    }
    let norm = t.frobenius_norm();
    if norm == 0.0 {
        return Ok(CpAlsResult {
            factors: CpFactors::zeros(t.dims, rank),
            fit: 1.0,
            sweeps: 0,
            residual_trace: Vec::new(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = CpFactors::random_uniform(t.dims, rank, 0.5, &mut rng);
    let mut trace = Vec::new();
    let mut fit = f64::NEG_INFINITY;
    let mut sweeps = 0;
    for _ in 0..max_iters {
        f.a = solve_mode(mttkrp(t, &f, Mode::A), &hadamard(&f.b.gram(), &f.c.gram()))?;
        f.b = solve_mode(mttkrp(t, &f, Mode::B), &hadamard(&f.a.gram(), &f.c.gram()))?;
        f.c = solve_mode(mttkrp(t, &f, Mode::C), &hadamard(&f.a.gram(), &f.b.gram()))?;
        sweeps += 1;

        let residual = t.distance(&cp_reconstruct(&f))?;
        trace.push(residual);
        let new_fit = 1.0 - residual / norm;
        let delta = (new_fit - fit).abs();
        fit = new_fit;
        if delta < tol {
            break;
        }
    }
    Ok(CpAlsResult { factors: f, fit, sweeps, residual_trace: trace })
}

#[derive(Clone, Copy)]
enum Mode {
    A,
    B,
    C,
}

/// Matricized tensor times Khatri-Rao product of the other two factors.
fn mttkrp(t: &DenseTensor3, f: &CpFactors, mode: Mode) -> Mat {
    let (na, mb, mc) = t.dims;
    let k = f.rank();
    let rows = match mode {
        Mode::A => na,
        Mode::B => mb,
        Mode::C => mc,
    };
    let mut out = Mat::zeros(rows, k);
    for a in 0..na {
        for b in 0..mb {
            let base = (a * mb + b) * mc;
            for c in 0..mc {
                let x = t.values[base + c];
                if x == 0.0 {
                    continue;
                }
                let (dst, u, v) = match mode {
                    Mode::A => (a, f.b.row(b), f.c.row(c)),
                    Mode::B => (b, f.a.row(a), f.c.row(c)),
                    Mode::C => (c, f.a.row(a), f.b.row(b)),
                };
                let row = out.row_mut(dst);
                for j in 0..k {
                    row[j] += x * u[j] * v[j];
                }
            }
        }
    }
    out
}

fn hadamard(x: &Mat, y: &Mat) -> Mat {
    let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
    Mat { rows: x.rows, cols: x.cols, data }
}

/// Solves `F G = M` for `F` with `G` symmetric positive semi-definite.
fn solve_mode(m: Mat, gram: &Mat) -> Result<Mat> {
    let k = gram.rows;
    let g = DMatrix::from_fn(k, k, |i, j| gram.get(i, j));
    // columns of rhs are rows of m
    let rhs = DMatrix::from_fn(k, m.rows, |i, r| m.get(r, i));
    let jittered = || &g + DMatrix::identity(k, k) * ALS_JITTER;
    let sol = if let Some(ch) = g.clone().cholesky() {
        ch.solve(&rhs)
    } else if let Some(ch) = jittered().cholesky() {
        ch.solve(&rhs)
    } else {
        jittered().lu().solve(&rhs).ok_or_else(|| Error::ShapeMismatch("singular ALS normal equations".into()))?
    };
    Ok(Mat::from_fn(m.rows, k, |r, i| sol[(i, r)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    // brute-force reference, independent of the cp_reconstruct loop order
    fn naive(f: &CpFactors, a: usize, b: usize, c: usize) -> f64 {
        (0..f.rank()).map(|k| f.a.get(a, k) * f.b.get(b, k) * f.c.get(c, k)).sum()
    }

    #[test]
    fn reconstruct_examples() {
        let f = CpFactors::new(mat(1, 1, &[2.0]), mat(1, 1, &[3.0]), mat(1, 1, &[5.0])).unwrap();
        assert_eq!(cp_reconstruct(&f).values, vec![30.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut f = CpFactors::random_uniform((3, 4, 2), 3, 1.0, &mut rng);
        f.a = Mat::zeros(3, 3);
        assert!(cp_reconstruct(&f).values.iter().all(|&v| v == 0.0));

        let f =
            CpFactors::new(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]), mat(1, 2, &[1.0, 1.0]), mat(1, 2, &[1.0, -1.0])).unwrap();
        let t = cp_reconstruct(&f);
        assert_eq!(t.get(0, 0, 0), naive(&f, 0, 0, 0));
        assert_eq!(t.get(0, 0, 0), 1.0);
        assert_eq!(t.get(1, 0, 0), -1.0);
    }

    #[test]
    fn reconstruct_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = CpFactors::random_uniform((3, 5, 4), 3, 1.0, &mut rng);
        let t = cp_reconstruct(&f);
        for a in 0..3 {
            for b in 0..5 {
                for c in 0..4 {
                    assert_abs_diff_eq!(t.get(a, b, c), naive(&f, a, b, c), epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn reconstruction_is_linear_in_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = CpFactors::random_uniform((4, 3, 5), 2, 1.0, &mut rng);
        let mut g = f.clone();
        for v in &mut g.a.data {
            *v *= -2.5;
        }
        let t = cp_reconstruct(&f);
        let u = cp_reconstruct(&g);
        for (x, y) in t.values.iter().zip(&u.values) {
            assert_abs_diff_eq!(-2.5 * x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn als_recovers_planted_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let truth = CpFactors::random_uniform((4, 6, 5), 2, 1.0, &mut rng);
        let t = cp_reconstruct(&truth);
        let res = cp_als(&t, 2, 500, 1e-14, 7).unwrap();
        assert!(res.fit >= 1.0 - 1e-6, "fit {}", res.fit);
        let slack = 1e-10;
        for w in res.residual_trace.windows(2) {
            assert!(w[1] <= w[0] + slack, "{:?}", w);
        }
    }

    #[test]
    fn als_rank_one_ones() {
        let t = DenseTensor3::from_vec((2, 2, 2), vec![1.0; 8]).unwrap();
        let res = cp_als(&t, 1, 100, 1e-14, 0).unwrap();
        let r = cp_reconstruct(&res.factors);
        for (x, y) in t.values.iter().zip(&r.values) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn als_zero_tensor() {
        let t = DenseTensor3::zeros((3, 2, 4));
        let res = cp_als(&t, 3, 10, 1e-6, 0).unwrap();
        assert_eq!(res.fit, 1.0);
        assert!(cp_reconstruct(&res.factors).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn als_rejects_bad_arguments() {
        let t = DenseTensor3::zeros((1, 1, 1));
        assert!(cp_als(&t, 0, 10, 1e-6, 0).is_err());
        assert!(cp_als(&t, 1, 0, 1e-6, 0).is_err());
        assert!(cp_als(&t, 1, 10, 0.0, 0).is_err());
    }

    #[test]
    fn als_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = DenseTensor3::from_fn((3, 4, 5), |_, _, _| rng.random_range(-1.0..1.0));
        let x = cp_als(&t, 2, 20, 1e-12, 11).unwrap();
        let y = cp_als(&t, 2, 20, 1e-12, 11).unwrap();
        assert_eq!(x.factors, y.factors);
    }

    #[test]
    fn residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = CpFactors::random_uniform((2, 3, 4), 2, 1.0, &mut rng);
        let t = cp_reconstruct(&f);
        assert!(relative_residual(&t, &f).unwrap() <= 1e-12);
        let z = CpFactors::zeros((2, 3, 4), 2);
        assert_abs_diff_eq!(relative_residual(&t, &z).unwrap(), 1.0, epsilon = 1e-15);

        // ‖t‖ = 5 (entries 3 and 4); rank-1 reconstruction (3, 3.5) misses by 0.5
        let t = DenseTensor3::from_vec((1, 2, 1), vec![3.0, 4.0]).unwrap();
        let f = CpFactors::new(mat(1, 1, &[1.0]), mat(2, 1, &[3.0, 3.5]), mat(1, 1, &[1.0])).unwrap();
        let brute = ((3.0f64 - 3.0).powi(2) + (4.0f64 - 3.5).powi(2)).sqrt() / 5.0;
        assert_abs_diff_eq!(brute, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(relative_residual(&t, &f).unwrap(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn split_by_norm_and_balance_preserve_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut f = CpFactors::random_uniform((3, 4, 5), 4, 1.0, &mut rng);
        f.scale_for_test(2, 10.0);
        let before = cp_reconstruct(&f);
        f.balance();
        let after = cp_reconstruct(&f);
        assert!(before.distance(&after).unwrap() < 1e-12);

        let (dense, sparse) = f.split_by_norm(2).unwrap();
        assert_eq!((dense.rank(), sparse.rank()), (2, 2));
        assert_eq!(dense.a.column(0), f.a.column(2));
        let sum = cp_reconstruct(&dense).add(&cp_reconstruct(&sparse)).unwrap();
        assert!(sum.distance(&after).unwrap() < 1e-12);
        assert!(dense.component_norm(1) >= sparse.component_norm(0));
    }

    impl CpFactors {
        fn scale_for_test(&mut self, k: usize, s: f64) {
            self.a.scale_column(k, s);
        }
    }
}
