//! KKT system of the regularized problem, its block Riesz preconditioner,
//! preconditioned MINRES and the preconditioned spectrum.
//!
//! Unknowns are ordered `(u, v, p, mu_v, mu_p)`: control on the active H
//! band, state and adjoint on the active bulk, and the two multipliers of
//! the mean constraints `<v, 1> = <p, 1> = 0`. The matrix reads
//!
//! ```text
//! [ alpha B_U   0      -C     0   0 ]
//! [ 0           B_B     K     m   0 ]
//! [ -C^T        K       0     0   m ]
//! [ 0           m^T     0     0   0 ]
//! [ 0           0       m^T   0   0 ]
//! ```
//!
//! with `C` the interface product between control and state spaces.

use std::time::{Duration, Instant};

use faer::{Mat, Par, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{OperatorSet, SharpOperatorSet};
use crate::sparse::{self, dot, Cholesky, Coo, Csr, SparseError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("regularization weight must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Riesz block factorization failed: {0}")]
    Factorization(#[from] SparseError),
    #[error("preconditioner is not positive definite (z.v = {0:e})")]
    IndefinitePreconditioner(f64),
    #[error("dense spectrum dimension {dim} exceeds the cap {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("dense eigensolver failed: {0}")]
    Eigen(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrecondMode {
    #[default]
    Exact,
    GaussSeidel,
}

impl PrecondMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PrecondMode::Exact => "exact",
            PrecondMode::GaussSeidel => "gauss_seidel",
        }
    }
}

/// Number of symmetric Gauss-Seidel sweeps in smoother mode.
pub const SMOOTHER_SWEEPS: usize = 3;

#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub alpha: f64,
    pub nu: usize,
    pub nv: usize,
    /// Control Riesz matrix.
    pub b_u: Csr,
    /// Control-state interface product, `nu x nv`.
    pub c: Csr,
    pub b_b: Csr,
    pub k: Csr,
    pub m: Vec<f64>,
    pub matrix: Csr,
    pub rhs: Vec<f64>,
}

impl SaddleSystem {
    pub fn dim(&self) -> usize {
        self.nu + 2 * self.nv + 2
    }

    /// Offsets of the `u, v, p, mu_v, mu_p` blocks.
    pub fn offsets(&self) -> [usize; 5] {
        let (nu, nv) = (self.nu, self.nv);
        [0, nu, nu + nv, nu + 2 * nv, nu + 2 * nv + 1]
    }

    /// Builds the system from its blocks; `data_rhs` is the state-row
    /// right-hand side `B_B f`.
    pub fn from_blocks(
        alpha: f64,
        b_u: Csr,
        c: Csr,
        b_b: Csr,
        k: Csr,
        m: Vec<f64>,
        data_rhs: Vec<f64>,
    ) -> Result<Self, SolverError> {
        let nu = b_u.nrows;
        let nv = k.nrows;
        let ok = b_u.ncols == nu
            && (c.nrows, c.ncols) == (nu, nv)
            && (b_b.nrows, b_b.ncols) == (nv, nv)
            && k.ncols == nv
            && m.len() == nv
            && data_rhs.len() == nv;
        if !ok {
            return Err(SolverError::Dimension(format!("nu = {nu}, nv = {nv}")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(SolverError::InvalidAlpha(alpha));
        }
        let n = nu + 2 * nv + 2;
        let (ov, op, omv, omp) = (nu, nu + nv, nu + 2 * nv, nu + 2 * nv + 1);
        let mut a = Coo::new(n, n);
        for i in 0..nu {
            for (j, x) in b_u.row(i) {
                a.push(i, j, alpha * x);
            }
            for (j, x) in c.row(i) {
                a.push(i, op + j, -x);
                a.push(op + j, i, -x);
            }
        }
        for i in 0..nv {
            for (j, x) in b_b.row(i) {
                a.push(ov + i, ov + j, x);
            }
            for (j, x) in k.row(i) {
                a.push(ov + i, op + j, x);
                a.push(op + i, ov + j, x);
            }
            if m[i] != 0.0 {
                a.push(ov + i, omv, m[i]);
                a.push(omv, ov + i, m[i]);
                a.push(op + i, omp, m[i]);
                a.push(omp, op + i, m[i]);
            }
        }
        let mut rhs = vec![0.0; n];
        rhs[ov..ov + nv].copy_from_slice(&data_rhs);
        Ok(SaddleSystem { alpha, nu, nv, b_u, c, b_b, k, m, matrix: a.to_csr(), rhs })
    }

    /// Splits a solution vector into full-length `(u, v, p)` fields and the
    /// multipliers.
    pub fn unpack(&self, x: &[f64], active_u: &[usize], active_v: &[usize], n: usize) -> SaddleSolution {
        let [_, ov, op, omv, omp] = self.offsets();
        let mut u = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        for (k, &i) in active_u.iter().enumerate() {
            u[i] = x[k];
        }
        for (k, &i) in active_v.iter().enumerate() {
            v[i] = x[ov + k];
            p[i] = x[op + k];
        }
        SaddleSolution { u, v, p, mu_v: x[omv], mu_p: x[omp] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub mu_v: f64,
    pub mu_p: f64,
}

fn check_alpha(alpha: f64) -> Result<(), SolverError> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(SolverError::InvalidAlpha(alpha))
    }
}

/// Diffuse KKT system for extended data `f_tilde` (a full nodal vector).
pub fn build_system(ops: &OperatorSet, alpha: f64, f_tilde: &[f64]) -> Result<SaddleSystem, SolverError> {
    check_alpha(alpha)?;
    build_system_any_alpha(ops, alpha, f_tilde)
}

/// As `build_system`, but also accepts `alpha = 0` for spectrum studies.
pub fn build_system_any_alpha(ops: &OperatorSet, alpha: f64, f_tilde: &[f64]) -> Result<SaddleSystem, SolverError> {
    let n = ops.k_omega.nrows;
    if f_tilde.len() != n {
        return Err(SolverError::Dimension(format!("data has {} entries, mesh has {n}", f_tilde.len())));
    }
    let (au, av) = (&ops.active_u, &ops.active_v);
    let b_b = ops.b_b.restrict(av, av);
    let fa: Vec<f64> = av.iter().map(|&i| f_tilde[i]).collect();
    let data_rhs = b_b.matvec(&fa);
    SaddleSystem::from_blocks(
        alpha,
        ops.b_h.restrict(au, au),
        ops.b_h.restrict(au, av),
        b_b,
        ops.k_omega.restrict(av, av),
        av.iter().map(|&i| ops.mean_vec[i]).collect(),
        data_rhs,
    )
}

/// Sharp KKT system for nodal data `f` on the outer boundary.
pub fn build_sharp_system(ops: &SharpOperatorSet, alpha: f64, f: &[f64]) -> Result<SaddleSystem, SolverError> {
    check_alpha(alpha)?;
    let n = ops.k_d.nrows;
    if f.len() != n {
        return Err(SolverError::Dimension(format!("data has {} entries, mesh has {n}", f.len())));
    }
    let all: Vec<usize> = (0..n).collect();
    let inner = &ops.inner_nodes;
    SaddleSystem::from_blocks(
        alpha,
        ops.t_inner.restrict(inner, inner),
        ops.t_inner.restrict(inner, &all),
        ops.t_outer.clone(),
        ops.k_d.clone(),
        ops.mean_vec_sharp.clone(),
        ops.t_outer.matvec(f),
    )
}

enum Block {
    Exact(Cholesky),
    Smoother { a: Csr, diag: Vec<f64> },
}

impl Block {
    fn new(a: &Csr, mode: PrecondMode) -> Result<Self, SolverError> {
        Ok(match mode {
            PrecondMode::Exact => Block::Exact(Cholesky::factor(a)?),
            PrecondMode::GaussSeidel => {
                let diag = a.diagonal();
                if diag.iter().any(|&d| d <= 0.0) {
                    return Err(SolverError::Factorization(SparseError::NotSpd("nonpositive diagonal".into())));
                }
                Block::Smoother { a: a.clone(), diag }
            }
        })
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        match self {
            Block::Exact(c) => c.solve(r),
            Block::Smoother { a, diag } => sparse::symmetric_gauss_seidel(a, diag, r, SMOOTHER_SWEEPS),
        }
    }
}

/// Block-diagonal inverse Riesz map `diag(R_U, R_H, R_H, s, s)^{-1}`.
pub struct RieszPreconditioner {
    pub mode: PrecondMode,
    pub r_u: Csr,
    pub r_h: Csr,
    pub s: f64,
    u_block: Block,
    h_block: Block,
}

impl std::fmt::Debug for RieszPreconditioner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RieszPreconditioner({:?}, nu = {}, nv = {})", self.mode, self.r_u.nrows, self.r_h.nrows)
    }
}

impl RieszPreconditioner {
    pub fn new(r_u: Csr, r_h: Csr, s: f64, mode: PrecondMode) -> Result<Self, SolverError> {
        if !(s > 0.0) {
            return Err(SolverError::Factorization(SparseError::NotSpd(format!("multiplier scale {s}"))));
        }
        let u_block = Block::new(&r_u, mode)?;
        let h_block = Block::new(&r_h, mode)?;
        Ok(RieszPreconditioner { mode, r_u, r_h, s, u_block, h_block })
    }

    /// Diffuse preconditioner: `B_H` on the control block, `K + M` on the
    /// state and adjoint blocks, `<1, 1>` on the multipliers.
    pub fn diffuse(ops: &OperatorSet, mode: PrecondMode) -> Result<Self, SolverError> {
        let (au, av) = (&ops.active_u, &ops.active_v);
        let r_h = ops.k_omega.add_scaled(1.0, &ops.m_omega, 1.0).restrict(av, av);
        let s: f64 = ops.mean_vec.iter().sum();
        Self::new(ops.b_h.restrict(au, au), r_h, s, mode)
    }

    pub fn sharp(ops: &SharpOperatorSet, mode: PrecondMode) -> Result<Self, SolverError> {
        let inner = &ops.inner_nodes;
        let r_h = ops.k_d.add_scaled(1.0, &ops.m_d, 1.0);
        let s: f64 = ops.mean_vec_sharp.iter().sum();
        Self::new(ops.t_inner.restrict(inner, inner), r_h, s, mode)
    }

    pub fn dim(&self) -> usize {
        self.r_u.nrows + 2 * self.r_h.nrows + 2
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.dim());
        let (nu, nv) = (self.r_u.nrows, self.r_h.nrows);
        let mut z = Vec::with_capacity(r.len());
        z.extend(self.u_block.apply(&r[..nu]));
        z.extend(self.h_block.apply(&r[nu..nu + nv]));
        z.extend(self.h_block.apply(&r[nu + nv..nu + 2 * nv]));
        z.push(r[nu + 2 * nv] / self.s);
        z.push(r[nu + 2 * nv + 1] / self.s);
        z
    }

    /// Multiplies by the Riesz matrix itself.
    pub fn riesz_matvec(&self, x: &[f64]) -> Vec<f64> {
        let (nu, nv) = (self.r_u.nrows, self.r_h.nrows);
        let mut y = Vec::with_capacity(x.len());
        y.extend(self.r_u.matvec(&x[..nu]));
        y.extend(self.r_h.matvec(&x[nu..nu + nv]));
        y.extend(self.r_h.matvec(&x[nu + nv..nu + 2 * nv]));
        y.push(x[nu + 2 * nv] * self.s);
        y.push(x[nu + 2 * nv + 1] * self.s);
        y
    }

    /// The Riesz matrix as one sparse block-diagonal matrix.
    pub fn riesz_matrix(&self) -> Csr {
        let (nu, nv) = (self.r_u.nrows, self.r_h.nrows);
        let n = self.dim();
        let mut c = Coo::new(n, n);
        for i in 0..nu {
            for (j, v) in self.r_u.row(i) {
                c.push(i, j, v);
            }
        }
        for off in [nu, nu + nv] {
            for i in 0..nv {
                for (j, v) in self.r_h.row(i) {
                    c.push(off + i, off + j, v);
                }
            }
        }
        c.push(n - 2, n - 2, self.s);
        c.push(n - 1, n - 1, self.s);
        c.to_csr()
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// Preconditioned relative residuals, one entry per iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub wall_time: Duration,
}

/// Symmetric operator for MINRES.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

impl LinearOperator for Csr {
    fn dim(&self) -> usize {
        self.nrows
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }
}

impl LinearOperator for SaddleSystem {
    fn dim(&self) -> usize {
        self.matrix.nrows
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.matvec(x)
    }
}

/// Preconditioned MINRES from a zero initial guess. Stops when the
/// preconditioned residual norm `sqrt(r^T P^{-1} r)` relative to its
/// initial value drops below `rho`.
pub fn minres_with<A: LinearOperator, P: Fn(&[f64]) -> Vec<f64>>(
    a: &A,
    b: &[f64],
    prec: P,
    rho: f64,
    max_iter: usize,
) -> Result<SolveReport, SolverError> {
    let start = Instant::now();
    let n = a.dim();
    if b.len() != n {
        return Err(SolverError::Dimension(format!("rhs {} vs operator {n}", b.len())));
    }
    let mut x = vec![0.0; n];
    let mut v_old = vec![0.0; n];
    let mut v = b.to_vec();
    let mut z = prec(&v);
    let zv = dot(&z, &v);
    if zv < 0.0 {
        return Err(SolverError::IndefinitePreconditioner(zv));
    }
    let mut gamma = zv.sqrt();
    let eta0 = gamma;
    let mut history = Vec::new();
    if eta0 == 0.0 {
        return Ok(SolveReport { solution: x, iterations: 0, residual_history: history, converged: true, wall_time: start.elapsed() });
    }
    let mut eta = gamma;
    let mut gamma_old = 1.0;
    let (mut s_old, mut s) = (0.0, 0.0);
    let (mut c_old, mut c) = (1.0, 1.0);
    let mut w_old = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        z.iter_mut().for_each(|zi| *zi /= gamma);
        let az = a.apply(&z);
        let delta = dot(&az, &z);
        let mut v_new = az;
        for i in 0..n {
            v_new[i] -= (delta / gamma) * v[i] + (gamma / gamma_old) * v_old[i];
        }
        let z_new = prec(&v_new);
        let zv = dot(&z_new, &v_new);
        if zv < -1e-14 * eta0 * eta0 {
            return Err(SolverError::IndefinitePreconditioner(zv));
        }
        let gamma_new = zv.max(0.0).sqrt();
        let a0 = c * delta - c_old * s * gamma;
        let a1 = a0.hypot(gamma_new);
        let a2 = s * delta + c_old * c * gamma;
        let a3 = s_old * gamma;
        let c_new = a0 / a1;
        let s_new = gamma_new / a1;
        let mut w_new = vec![0.0; n];
        for i in 0..n {
            w_new[i] = (z[i] - a3 * w_old[i] - a2 * w[i]) / a1;
            x[i] += c_new * eta * w_new[i];
        }
        eta *= -s_new;
        let rel = eta.abs() / eta0;
        history.push(rel);
        if rel < rho || gamma_new == 0.0 {
            converged = rel < rho || gamma_new == 0.0;
            break;
        }
        v_old = std::mem::replace(&mut v, v_new);
        z = z_new;
        gamma_old = gamma;
        gamma = gamma_new;
        w_old = std::mem::replace(&mut w, w_new);
        s_old = s;
        s = s_new;
        c_old = c;
        c = c_new;
    }
    Ok(SolveReport { solution: x, iterations, residual_history: history, converged, wall_time: start.elapsed() })
}

pub fn minres(
    system: &SaddleSystem,
    prec: &RieszPreconditioner,
    rho: f64,
    max_iter: usize,
) -> Result<SolveReport, SolverError> {
    if prec.dim() != system.dim() {
        return Err(SolverError::Dimension(format!("system {} vs preconditioner {}", system.dim(), prec.dim())));
    }
    minres_with(system, &system.rhs, |r| prec.apply(r), rho, max_iter)
}

fn dense(a: &Csr) -> Mat<f64> {
    let mut m = Mat::<f64>::zeros(a.nrows, a.ncols);
    for i in 0..a.nrows {
        for (j, v) in a.row(i) {
            m[(i, j)] += v;
        }
    }
    m
}

/// Eigenvalues of the pencil `(A, P)` with `P` the Riesz matrix, sorted
/// ascending.
pub fn spectrum(system: &SaddleSystem, prec: &RieszPreconditioner, cap: usize) -> Result<Vec<f64>, SolverError> {
    let n = system.dim();
    if n > cap {
        return Err(SolverError::DimensionCap { dim: n, cap });
    }
    if prec.dim() != n {
        return Err(SolverError::Dimension(format!("system {n} vs preconditioner {}", prec.dim())));
    }
    let p = dense(&prec.riesz_matrix());
    let llt = p.llt(Side::Lower).map_err(|e| SolverError::Eigen(format!("{e:?}")))?;
    let l = llt.L();
    let mut x = dense(&system.matrix);
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, x.as_mut(), Par::Seq);
    let mut y = x.transpose().to_owned();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, y.as_mut(), Par::Seq);
    let c = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (y[(i, j)] + y[(j, i)]));
    c.self_adjoint_eigenvalues(Side::Lower).map_err(|e| SolverError::Eigen(format!("{e:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_converges_in_one_step() {
        let a = Csr::identity(7);
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 2.5).collect();
        let r = minres_with(&a, &b, |x| x.to_vec(), 1e-12, 50).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert!(r.solution.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn indefinite_diagonal_system() {
        let n = 40;
        let mut c = Coo::new(n, n);
        for i in 0..n {
            c.push(i, i, if i % 2 == 0 { 1.0 + i as f64 } else { -(1.0 + i as f64) });
            if i + 1 < n {
                c.push(i, i + 1, 0.3);
                c.push(i + 1, i, 0.3);
            }
        }
        let a = c.to_csr();
        let b = vec![1.0; n];
        let r = minres_with(&a, &b, |x| x.to_vec(), 1e-12, 500).unwrap();
        assert!(r.converged);
        let res: Vec<f64> = a.matvec(&r.solution).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(sparse::norm2(&res) < 1e-10);
        assert!(r.residual_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn rejects_nonpositive_alpha() {
        let e = Csr::identity(1);
        let err = SaddleSystem::from_blocks(-1.0, e.clone(), e.clone(), e.clone(), e, vec![1.0], vec![0.0]);
        assert!(matches!(err, Err(SolverError::InvalidAlpha(_))));
    }
}
