//! Rectangular spatial grids, one-hot position features, and the
//! parent/children maps that connect a coarse grid to a finer one.
//!
//! Cells are indexed row-major: `index(r, c) = r * cols + c`, with row 0 at
//! the grid origin. Cell intervals are half-open, so a point on a shared
//! boundary belongs to the cell whose interval starts there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D domain coordinate `[x, y]`.
pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub origin: Point,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, cell_size: f64, origin: Point) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimension(format!(
                "grid must have at least one row and column, got {rows}x{cols}"
            )));
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidDimension(format!("cell_size must be positive and finite, got {cell_size}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidDimension("origin must be finite".into()));
        }
        Ok(Self { rows, cols, cell_size, origin })
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Upper corner of the extent (exclusive).
    pub fn max_corner(&self) -> Point {
        [self.origin[0] + self.cols as f64 * self.cell_size, self.origin[1] + self.rows as f64 * self.cell_size]
    }

    pub fn contains(&self, p: Point) -> bool {
        let hi = self.max_corner();
        p[0] >= self.origin[0] && p[0] < hi[0] && p[1] >= self.origin[1] && p[1] < hi[1]
    }

    pub fn cell_center(&self, index: usize) -> Point {
        let (r, c) = self.row_col(index);
        [self.origin[0] + (c as f64 + 0.5) * self.cell_size, self.origin[1] + (r as f64 + 0.5) * self.cell_size]
    }

    /// Cell containing `p`, or `OutOfBounds`.
    pub fn cell_of(&self, p: Point) -> Result<usize> {
        if !self.contains(p) {
            return Err(Error::OutOfBounds { x: p[0], y: p[1] });
        }
        // rounding can push a point just below the upper edge onto it
        let col = (((p[0] - self.origin[0]) / self.cell_size).floor() as usize).min(self.cols - 1);
        let row = (((p[1] - self.origin[1]) / self.cell_size).floor() as usize).min(self.rows - 1);
        Ok(self.index(row, col))
    }

    pub fn encode_position(&self, p: Point) -> Result<FeatureVector> {
        Ok(FeatureVector::one_hot(self.cell_count(), self.cell_of(p)?))
    }

    /// Occupancy encoding of several points: one active cell per distinct
    /// occupied cell, value 1.0, indices ascending.
    pub fn encode_occupancy(&self, points: &[Point]) -> Result<FeatureVector> {
        let mut idx = points.iter().map(|&p| self.cell_of(p)).collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        idx.dedup();
        let values = vec![1.0; idx.len()];
        Ok(FeatureVector { indices: idx, values, dim: self.cell_count() })
    }

    /// Dyadic refinement: twice the rows and columns at half the cell size.
    pub fn refine_dyadic(&self) -> (Grid, RefinementMap) {
        let fine =
            Grid { rows: self.rows * 2, cols: self.cols * 2, cell_size: self.cell_size / 2.0, origin: self.origin };
        let mut children = Vec::with_capacity(self.cell_count());
        for r in 0..self.rows {
            for c in 0..self.cols {
                children.push(vec![
                    fine.index(2 * r, 2 * c),
                    fine.index(2 * r, 2 * c + 1),
                    fine.index(2 * r + 1, 2 * c),
                    fine.index(2 * r + 1, 2 * c + 1),
                ]);
            }
        }
        let map = RefinementMap::from_children(*self, fine, children).expect("dyadic split is a partition");
        (fine, map)
    }
}

pub fn build_grid(rows: usize, cols: usize, cell_size: f64, origin: Point) -> Result<Grid> {
    Grid::new(rows, cols, cell_size, origin)
}

/// Sparse feature vector over the cells of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub dim: usize,
}

impl FeatureVector {
    pub fn one_hot(dim: usize, index: usize) -> Self {
        Self { indices: vec![index], values: vec![1.0], dim }
    }

    pub fn new(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::LengthMismatch { expected: indices.len(), got: values.len() });
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidDimension("duplicate feature index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::InvalidIndex { index: bad, len: dim });
        }
        Ok(Self { indices, values, dim })
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// The single active index of a one-hot vector.
    pub fn active_index(&self) -> Option<usize> {
        match self.indices.as_slice() {
            [i] => Some(*i),
            _ => None,
        }
    }

    /// Re-express this vector on a coarser grid via `map` (values of children
    /// sharing a parent are summed).
    pub fn coarsen(&self, map: &RefinementMap) -> Result<FeatureVector> {
        if self.dim != map.fine.cell_count() {
            return Err(Error::DimensionMismatch(format!(
                "feature dim {} vs fine grid {}",
                self.dim,
                map.fine.cell_count()
            )));
        }
        let mut pairs: Vec<(usize, f64)> = Vec::new();
        for (i, v) in self.iter() {
            let p = map.parent(i)?;
            match pairs.iter_mut().find(|(j, _)| *j == p) {
                Some(slot) => slot.1 += v,
                None => pairs.push((p, v)),
            }
        }
        pairs.sort_by_key(|&(i, _)| i);
        let (indices, values) = pairs.into_iter().unzip();
        Ok(FeatureVector { indices, values, dim: map.coarse.cell_count() })
    }
}

/// Parent/children relation between a coarse and a fine grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementMap {
    pub coarse: Grid,
    pub fine: Grid,
    children: Vec<Vec<usize>>,
    parents: Vec<usize>,
}

impl RefinementMap {
    /// Builds a map from explicit children lists; fails unless the lists
    /// partition the fine cells.
    pub fn from_children(coarse: Grid, fine: Grid, children: Vec<Vec<usize>>) -> Result<Self> {
        if children.len() != coarse.cell_count() {
            return Err(Error::LengthMismatch { expected: coarse.cell_count(), got: children.len() });
        }
        let mut parents = vec![usize::MAX; fine.cell_count()];
        for (c, kids) in children.iter().enumerate() {
            for &f in kids {
                if f >= parents.len() {
                    return Err(Error::InvalidIndex { index: f, len: parents.len() });
                }
                if parents[f] != usize::MAX {
                    return Err(Error::GridMismatch(format!("fine cell {f} has two parents")));
                }
                parents[f] = c;
            }
        }
        if let Some(orphan) = parents.iter().position(|&p| p == usize::MAX) {
            return Err(Error::GridMismatch(format!("fine cell {orphan} has no parent")));
        }
        Ok(Self { coarse, fine, children, parents })
    }

    /// Assigns every fine cell to the coarse cell containing its center.
    /// Works for any pair of overlapping grids, nested or not.
    pub fn by_center(coarse: Grid, fine: Grid) -> Result<Self> {
        let mut children = vec![Vec::new(); coarse.cell_count()];
        for f in 0..fine.cell_count() {
            let c = coarse
                .cell_of(fine.cell_center(f))
                .map_err(|_| Error::GridMismatch(format!("center of fine cell {f} lies outside the coarse grid")))?;
            children[c].push(f);
        }
        Self::from_children(coarse, fine, children)
    }

    pub fn identity(g: Grid) -> Self {
        let children = (0..g.cell_count()).map(|i| vec![i]).collect();
        Self::from_children(g, g, children).expect("identity is a partition")
    }

    pub fn is_identity(&self) -> bool {
        self.coarse == self.fine
    }

    pub fn children(&self, coarse_idx: usize) -> Result<&[usize]> {
        self.children
            .get(coarse_idx)
            .map(Vec::as_slice)
            .ok_or(Error::InvalidIndex { index: coarse_idx, len: self.children.len() })
    }

    pub fn parent(&self, fine_idx: usize) -> Result<usize> {
        self.parents.get(fine_idx).copied().ok_or(Error::InvalidIndex { index: fine_idx, len: self.parents.len() })
    }

    /// Parent of every fine cell, indexed by fine cell.
    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    /// `self` followed by `next` (coarse of `next` must be fine of `self`).
    pub fn compose(&self, next: &RefinementMap) -> Result<RefinementMap> {
        if self.fine != next.coarse {
            return Err(Error::GridMismatch("maps are not consecutive".into()));
        }
        let children = self
            .children
            .iter()
            .map(|mid| mid.iter().flat_map(|&m| next.children[m].iter().copied()).collect())
            .collect();
        Self::from_children(self.coarse, next.fine, children)
    }
}

pub fn refine_dyadic(g: &Grid) -> (Grid, RefinementMap) {
    g.refine_dyadic()
}

pub fn encode_position(g: &Grid, p: Point) -> Result<FeatureVector> {
    g.encode_position(p)
}

pub fn cell_of_fine(rm: &RefinementMap, fine_idx: usize) -> Result<usize> {
    rm.parent(fine_idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(rows: usize, cols: usize, cs: f64) -> Grid {
        Grid::new(rows, cols, cs, [0.0, 0.0]).unwrap()
    }

    #[test]
    fn build_grid_examples() {
        assert_eq!(build_grid(40, 50, 1.0, [0.0, 0.0]).unwrap().cell_count(), 2000);
        assert_eq!(build_grid(1, 1, 4.0, [0.0, 0.0]).unwrap().cell_count(), 1);
        assert_eq!(build_grid(12, 12, 1.0, [-6.0, -6.0]).unwrap().cell_count(), 144);
    }

    #[test]
    fn build_grid_rejects_bad_dimensions() {
        assert!(matches!(Grid::new(0, 3, 1.0, [0.0, 0.0]), Err(Error::InvalidDimension(_))));
        assert!(matches!(Grid::new(3, 0, 1.0, [0.0, 0.0]), Err(Error::InvalidDimension(_))));
        assert!(matches!(Grid::new(3, 3, 0.0, [0.0, 0.0]), Err(Error::InvalidDimension(_))));
        assert!(matches!(Grid::new(3, 3, -1.0, [0.0, 0.0]), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn dyadic_refinement() {
        let (fine, map) = g(5, 5, 4.0).refine_dyadic();
        assert_eq!((fine.rows, fine.cols, fine.cell_size), (10, 10, 2.0));
        for c in 0..25 {
            assert_eq!(map.children(c).unwrap().len(), 4);
        }

        let (fine, map) = g(1, 1, 2.0).refine_dyadic();
        assert_eq!((fine.rows, fine.cols, fine.cell_size), (2, 2, 1.0));
        let mut kids = map.children(0).unwrap().to_vec();
        kids.sort_unstable();
        assert_eq!(kids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn twice_refined_has_sixteen_grandchildren() {
        let base = g(5, 5, 4.0);
        let (mid, m1) = base.refine_dyadic();
        let (fine, m2) = mid.refine_dyadic();
        assert_eq!((fine.rows, fine.cols, fine.cell_size), (20, 20, 1.0));
        // brute force: count fine cells whose parent-of-parent is c
        for c in 0..base.cell_count() {
            let n = (0..fine.cell_count()).filter(|&f| m1.parent(m2.parent(f).unwrap()).unwrap() == c).count();
            assert_eq!(n, 16);
        }
        let composed = m1.compose(&m2).unwrap();
        for c in 0..base.cell_count() {
            assert_eq!(composed.children(c).unwrap().len(), 16);
        }
    }

    #[test]
    fn encode_examples() {
        let grid = g(2, 2, 1.0);
        assert_eq!(grid.encode_position([0.5, 0.5]).unwrap().indices, vec![0]);
        assert_eq!(grid.encode_position([1.5, 1.5]).unwrap().indices, vec![3]);
        assert!(matches!(grid.encode_position([2.0, 0.5]), Err(Error::OutOfBounds { .. })));
        assert!(matches!(grid.encode_position([-0.1, 0.5]), Err(Error::OutOfBounds { .. })));

        let court = g(40, 50, 1.0);
        let p = [25.3, 10.7];
        // oracle: scan every cell rectangle
        let hits: Vec<usize> = (0..court.cell_count())
            .filter(|&i| {
                let (r, c) = court.row_col(i);
                p[0] >= c as f64 && p[0] < (c + 1) as f64 && p[1] >= r as f64 && p[1] < (r + 1) as f64
            })
            .collect();
        assert_eq!(hits, vec![525]);
        assert_eq!(court.encode_position(p).unwrap().indices, vec![525]);
    }

    #[test]
    fn boundary_points_go_to_the_upper_cell() {
        let grid = g(2, 2, 1.0);
        assert_eq!(grid.cell_of([1.0, 0.0]).unwrap(), 1);
        assert_eq!(grid.cell_of([0.0, 1.0]).unwrap(), 2);
    }

    #[test]
    fn cell_of_fine_examples() {
        let (_, m) = g(1, 1, 2.0).refine_dyadic();
        assert_eq!(cell_of_fine(&m, 3).unwrap(), 0);
        let (_, m) = g(2, 2, 2.0).refine_dyadic();
        // invert the children lists by enumeration
        let inverse = |f: usize| (0..4).find(|&c| m.children(c).unwrap().contains(&f)).unwrap();
        assert_eq!(inverse(5), 0);
        assert_eq!(inverse(15), 3);
        assert_eq!(cell_of_fine(&m, 5).unwrap(), 0);
        assert_eq!(cell_of_fine(&m, 15).unwrap(), 3);
        assert!(matches!(cell_of_fine(&m, 16), Err(Error::InvalidIndex { .. })));
    }

    #[test]
    fn non_nested_schedule_by_center() {
        // 3-unit cells to 2-unit cells over a 12x12 court
        let coarse = Grid::new(4, 4, 3.0, [0.0, 0.0]).unwrap();
        let fine = Grid::new(6, 6, 2.0, [0.0, 0.0]).unwrap();
        let m = RefinementMap::by_center(coarse, fine).unwrap();
        let total: usize = (0..16).map(|c| m.children(c).unwrap().len()).sum();
        assert_eq!(total, 36);
    }

    #[test]
    fn from_children_rejects_non_partitions() {
        let coarse = g(1, 2, 2.0);
        let fine = g(2, 4, 1.0);
        let dup = vec![vec![0, 1, 4, 5], vec![1, 2, 3, 6, 7]];
        assert!(RefinementMap::from_children(coarse, fine, dup).is_err());
        let missing = vec![vec![0, 1, 4, 5], vec![2, 3, 6]];
        assert!(RefinementMap::from_children(coarse, fine, missing).is_err());
    }

    #[test]
    fn partition_exhaustive_up_to_64() {
        for n in [1usize, 2, 3, 8, 32] {
            let (fine, m) = g(n, n, 1.0).refine_dyadic();
            let mut all: Vec<usize> = (0..n * n).flat_map(|c| m.children(c).unwrap().to_vec()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..fine.cell_count()).collect::<Vec<_>>());
            for c in 0..n * n {
                for &f in m.children(c).unwrap() {
                    assert_eq!(m.parent(f).unwrap(), c);
                }
            }
        }
    }

    #[test]
    fn occupancy_collapses_duplicates() {
        let grid = g(4, 4, 1.0);
        let fv = grid.encode_occupancy(&[[0.2, 0.2], [0.7, 0.9], [3.5, 3.5]]).unwrap();
        assert_eq!(fv.indices, vec![0, 15]);
        assert_eq!(fv.values, vec![1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn encoding_is_refinement_consistent(
            rows in 1usize..9, cols in 1usize..9, x in 0.0f64..1.0, y in 0.0f64..1.0
        ) {
            let coarse = Grid::new(rows, cols, 4.0, [-3.0, 5.0]).unwrap();
            let (fine, map) = coarse.refine_dyadic();
            let hi = coarse.max_corner();
            let p = [-3.0 + x * (hi[0] + 3.0), 5.0 + y * (hi[1] - 5.0)];
            let cf = fine.encode_position(p).unwrap().active_index().unwrap();
            let cc = coarse.encode_position(p).unwrap().active_index().unwrap();
            prop_assert_eq!(map.parent(cf).unwrap(), cc);
        }

        #[test]
        fn row_major_indexing(rows in 1usize..30, cols in 1usize..30) {
            let grid = Grid::new(rows, cols, 1.0, [0.0, 0.0]).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    let i = grid.index(r, c);
                    prop_assert_eq!(i, r * cols + c);
                    prop_assert_eq!(grid.cell_of(grid.cell_center(i)).unwrap(), i);
                }
            }
        }
    }
}
