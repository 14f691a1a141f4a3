//! Sparse real LU factorization with threshold partial pivoting.
//!
//! Elimination proceeds column by column in natural order. Among the rows that
//! still hold an entry in the pivot column, any row whose entry is within
//! [`PIVOT_THRESHOLD`] of the largest is acceptable; the shortest such row is
//! chosen to limit fill-in, ties broken by the lowest row index so results are
//! deterministic.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub const PIVOT_THRESHOLD: f64 = 0.1;

/// Absolute pivot magnitude treated as zero, relative to the largest entry of
/// the original matrix.
pub const ZERO_PIVOT: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("matrix is singular: no usable pivot in column {column}")]
pub struct ZeroPivot {
    pub column: usize,
}

/// Square matrix held as one ordered map per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseMatrix {
    n: usize,
    rows: Vec<BTreeMap<usize, f64>>,
}

impl SparseMatrix {
    pub fn new(n: usize) -> Self {
        SparseMatrix {
            n,
            rows: vec![BTreeMap::new(); n],
        }
    }

    /// Builds a matrix by summing duplicate triplets.
    pub fn from_triplets(n: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut m = SparseMatrix::new(n);
        for (r, c, v) in entries {
            m.add(r, c, v);
        }
        m
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        assert!(row < self.n && col < self.n, "entry ({row}, {col}) outside {0}x{0}", self.n);
        *self.rows[row].entry(col).or_insert(0.0) += value;
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.rows[row].get(&col).copied().unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|(&c, &v)| v * x[c]).sum())
            .collect()
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows[row].iter().map(|(&c, &v)| (c, v))
    }

    pub fn factor(&self) -> Result<LuFactors, ZeroPivot> {
        LuFactors::new(self)
    }
}

/// Factors `P·A = L·U` with `L` stored as the sequence of row operations.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    /// `(target row, pivot row, multiplier)` in elimination order.
    ops: Vec<(usize, usize, f64)>,
    /// Pivot row chosen for each column.
    pivot_row: Vec<usize>,
    /// Row `k` of `U`: `(diagonal, [(col > k, value)])`.
    upper: Vec<(f64, Vec<(usize, f64)>)>,
}

impl LuFactors {
    fn new(a: &SparseMatrix) -> Result<Self, ZeroPivot> {
        let n = a.n;
        let scale = a
            .rows
            .iter()
            .flat_map(|r| r.values())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let tiny = ZERO_PIVOT * scale.max(f64::MIN_POSITIVE);

        let mut rows: Vec<BTreeMap<usize, f64>> = a.rows.clone();
        for r in &mut rows {
            r.retain(|_, v| *v != 0.0);
        }
        let mut col_rows: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (i, r) in rows.iter().enumerate() {
            for &c in r.keys() {
                col_rows[c].insert(i);
            }
        }
        let mut used = vec![false; n];
        let mut ops = Vec::new();
        let mut pivot_row = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);

        for k in 0..n {
            let candidates: Vec<usize> = col_rows[k].iter().copied().filter(|&r| !used[r]).collect();
            let max = candidates.iter().map(|&r| rows[r][&k].abs()).fold(0.0, f64::max);
            if max <= tiny {
                return Err(ZeroPivot { column: k });
            }
            let p = candidates
                .iter()
                .copied()
                .filter(|&r| rows[r][&k].abs() >= PIVOT_THRESHOLD * max)
                .min_by_key(|&r| (rows[r].len(), r))
                .unwrap();
            used[p] = true;
            let pivot_entries: Vec<(usize, f64)> = rows[p].iter().filter(|(&c, _)| c > k).map(|(&c, &v)| (c, v)).collect();
            let diag = rows[p][&k];
            for &r in &candidates {
                if r == p {
                    continue;
                }
                let f = rows[r].remove(&k).unwrap() / diag;
                col_rows[k].remove(&r);
                for &(c, v) in &pivot_entries {
                    let e = rows[r].entry(c).or_insert(0.0);
                    *e -= f * v;
                    col_rows[c].insert(r);
                }
                ops.push((r, p, f));
            }
            for &(c, _) in &pivot_entries {
                col_rows[c].remove(&p);
            }
            col_rows[k].remove(&p);
            pivot_row.push(p);
            upper.push((diag, pivot_entries));
        }
        Ok(LuFactors { n, ops, pivot_row, upper })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y = b.to_vec();
        for &(r, p, f) in &self.ops {
            y[r] -= f * y[p];
        }
        let mut x = vec![0.0; self.n];
        for k in (0..self.n).rev() {
            let (d, ref entries) = self.upper[k];
            let s: f64 = entries.iter().map(|&(c, v)| v * x[c]).sum();
            x[k] = (y[self.pivot_row[k]] - s) / d;
        }
        x
    }

    /// Number of stored entries in `L` and `U` (fill-in diagnostics).
    pub fn nnz(&self) -> usize {
        self.ops.len() + self.upper.iter().map(|(_, e)| 1 + e.len()).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, n: usize, density: f64) -> SparseMatrix {
        let mut m = SparseMatrix::new(n);
        for i in 0..n {
            m.add(i, i, rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            for j in 0..n {
                if i != j && rng.gen_bool(density) {
                    m.add(i, j, rng.gen_range(-1.0..1.0));
                }
            }
        }
        m
    }

    #[test]
    fn matches_dense_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let n = 5 + trial % 30;
            let m = random_sparse(&mut rng, n, 0.15);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dense = DMatrix::from_fn(n, n, |i, j| m.get(i, j));
            let Some(want) = dense.lu().solve(&DVector::from_vec(b.clone())) else { continue };
            let x = m.factor().unwrap().solve(&b);
            for i in 0..n {
                assert!((x[i] - want[i]).abs() < 1e-9 * want.amax().max(1.0));
            }
        }
    }

    #[test]
    fn needs_pivoting() {
        // Zero on the leading diagonal.
        let m = SparseMatrix::from_triplets(2, [(0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        let x = m.factor().unwrap().solve(&[2.0, 5.0]);
        assert!((x[0] - 3.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn reports_zero_pivot_column() {
        let m = SparseMatrix::from_triplets(3, [(0, 0, 1.0), (1, 1, 1.0), (2, 0, 1.0), (2, 1, 1.0)]);
        assert_eq!(m.factor().unwrap_err(), ZeroPivot { column: 2 });
    }

    #[test]
    fn duplicate_triplets_sum() {
        let m = SparseMatrix::from_triplets(1, [(0, 0, 1.5), (0, 0, 2.5)]);
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.factor().unwrap().solve(&[8.0]), vec![2.0]);
    }
}
