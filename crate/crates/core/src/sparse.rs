//! Compressed sparse row matrices, symmetric factorization and smoothing.

use std::fmt::Write as _;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::{Mat, Side};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric positive definite ({0})")]
    NotSpd(String),
}

/// Triplet accumulator; duplicates are summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct Coo {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Coo {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Coo { nrows, ncols, entries: Vec::new() }
    }

    #[inline]
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.entries.push((i, j, v));
    }

    pub fn to_csr(mut self) -> Csr {
        self.entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(self.entries.len());
        let mut data: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(i, j, v) in &self.entries {
            if last == Some((i, j)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                data.push(v);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.nrows {
            indptr[i + 1] += indptr[i];
        }
        Csr { nrows: self.nrows, ncols: self.ncols, indptr, indices, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Csr { nrows, ncols, indptr: vec![0; nrows + 1], indices: vec![], data: vec![] }
    }

    pub fn identity(n: usize) -> Self {
        Csr {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.data[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.indptr[i]..self.indptr[i + 1];
        match self.indices[r.clone()].binary_search(&j) {
            Ok(k) => self.data[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        for (i, yi) in y.iter_mut().enumerate().take(self.nrows) {
            let mut s = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                s += self.data[k] * x[self.indices[k]];
            }
            *yi = s;
        }
    }

    /// `x^T A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.matvec(x))
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.matvec(y))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Csr {
        let mut c = Coo::new(self.ncols, self.nrows);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                c.push(j, i, v);
            }
        }
        c.to_csr()
    }

    /// `a * self + b * other`.
    pub fn add_scaled(&self, a: f64, other: &Csr, b: f64) -> Csr {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut c = Coo::new(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                c.push(i, j, a * v);
            }
            for (j, v) in other.row(i) {
                c.push(i, j, b * v);
            }
        }
        c.to_csr()
    }

    pub fn scaled(&self, a: f64) -> Csr {
        let mut m = self.clone();
        m.data.iter_mut().for_each(|v| *v *= a);
        m
    }

    /// Submatrix on the given (sorted, unique) row and column index sets.
    pub fn restrict(&self, rows: &[usize], cols: &[usize]) -> Csr {
        let mut colmap = vec![usize::MAX; self.ncols];
        for (k, &j) in cols.iter().enumerate() {
            colmap[j] = k;
        }
        let mut c = Coo::new(rows.len(), cols.len());
        for (ri, &i) in rows.iter().enumerate() {
            for (j, v) in self.row(i) {
                let cj = colmap[j];
                if cj != usize::MAX {
                    c.push(ri, cj, v);
                }
            }
        }
        c.to_csr()
    }

    /// Relative asymmetry `max |A - A^T| / max |A|`.
    pub fn asymmetry(&self) -> f64 {
        let amax = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if amax == 0.0 {
            return 0.0;
        }
        let mut d = 0.0f64;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                d = d.max((v - self.get(j, i)).abs());
            }
        }
        d / amax
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        m
    }

    /// Coordinate dump, one `row col value` line per stored entry.
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {} {}", self.nrows, self.ncols, self.nnz()).unwrap();
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                writeln!(s, "{i} {j} {v:?}").unwrap();
            }
        }
        s
    }

    /// Same matrix as a faer column-major sparse matrix. For symmetric
    /// input the row structure is reused directly.
    fn to_faer_symmetric(&self) -> SparseColMat<usize, f64> {
        let sym = SymbolicSparseColMat::new_checked(
            self.nrows,
            self.ncols,
            self.indptr.clone(),
            None,
            self.indices.clone(),
        );
        SparseColMat::new(sym, self.data.clone())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Sparse Cholesky factorization of a symmetric positive definite matrix.
pub struct Cholesky {
    n: usize,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl std::fmt::Debug for Cholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Cholesky(n = {})", self.n)
    }
}

impl Cholesky {
    pub fn factor(a: &Csr) -> Result<Self, SparseError> {
        if a.nrows != a.ncols {
            return Err(SparseError::Dimension(format!("{} x {}", a.nrows, a.ncols)));
        }
        let m = a.to_faer_symmetric();
        let llt = m
            .sp_cholesky(Side::Lower)
            .map_err(|e| SparseError::NotSpd(format!("{e:?}")))?;
        Ok(Cholesky { n: a.nrows, llt })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut x = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        self.llt.solve_in_place(x.as_mut());
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}

/// Symmetric Gauss-Seidel sweeps for `A x = b` from a zero initial guess.
pub fn symmetric_gauss_seidel(a: &Csr, diag: &[f64], b: &[f64], sweeps: usize) -> Vec<f64> {
    let n = a.nrows;
    let mut x = vec![0.0; n];
    let relax = |x: &mut Vec<f64>, i: usize| {
        let mut s = b[i];
        for (j, v) in a.row(i) {
            if j != i {
                s -= v * x[j];
            }
        }
        x[i] = s / diag[i];
    };
    for _ in 0..sweeps {
        for i in 0..n {
            relax(&mut x, i);
        }
        for i in (0..n).rev() {
            relax(&mut x, i);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> Csr {
        let mut c = Coo::new(n, n);
        for i in 0..n {
            c.push(i, i, 2.0);
            if i > 0 {
                c.push(i, i - 1, -1.0);
                c.push(i - 1, i, -1.0);
            }
        }
        c.to_csr()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut c = Coo::new(2, 2);
        c.push(0, 0, 1.0);
        c.push(0, 0, 2.0);
        c.push(1, 0, 4.0);
        let m = c.to_csr();
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), 4.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn cholesky_solves() {
        let a = laplace_1d(50);
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let b = a.matvec(&x);
        let y = Cholesky::factor(&a).unwrap().solve(&b);
        let err = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-11);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = laplace_1d(5).scaled(-1.0);
        assert!(Cholesky::factor(&a).is_err());
    }

    #[test]
    fn restrict_and_transpose() {
        let a = laplace_1d(6);
        let r = a.restrict(&[1, 2, 4], &[1, 2, 4]);
        assert_eq!(r.to_dense(), vec![vec![2.0, -1.0, 0.0], vec![-1.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]]);
        assert_eq!(a.transpose(), a);
        assert_eq!(a.asymmetry(), 0.0);
    }

    #[test]
    fn gauss_seidel_reduces_error() {
        let a = laplace_1d(8);
        let b = vec![1.0; 8];
        let x = symmetric_gauss_seidel(&a, &a.diagonal(), &b, 200);
        let r: Vec<f64> = a.matvec(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(norm2(&r) < 1e-6);
    }
}
