//! Forward and adjoint solves, synthetic data, Tikhonov drivers and error
//! norms.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{OperatorSet, SharpOperatorSet};
use crate::geometry::{norm, AnnulusGeometry, ConductivityTensor};
use crate::mesh::TriMesh;
use crate::saddle_solver::{
    build_sharp_system, build_system, minres, PrecondMode, RieszPreconditioner, SaddleSolution, SolveReport,
    SolverError,
};
use crate::sparse::{dot, Cholesky, Csr, SparseError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InversionError {
    #[error("singular constrained system: {0}")]
    Singular(#[from] SparseError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Pure Neumann problem `K x + mu m = b`, `m^T x = 0`, solved with one
/// pinned degree of freedom and a constant shift.
pub struct ConstrainedSolver {
    n: usize,
    m: Vec<f64>,
    chol: Cholesky,
}

impl ConstrainedSolver {
    pub fn new(k: &Csr, m: &[f64]) -> Result<Self, InversionError> {
        let n = k.nrows;
        if n < 2 || m.len() != n {
            return Err(InversionError::Invalid(format!("system of size {n}")));
        }
        let free: Vec<usize> = (1..n).collect();
        let chol = Cholesky::factor(&k.restrict(&free, &free))?;
        Ok(ConstrainedSolver { n, m: m.to_vec(), chol })
    }

    /// Returns `(x, mu)`.
    pub fn solve(&self, b: &[f64]) -> (Vec<f64>, f64) {
        let sm: f64 = self.m.iter().sum();
        let mu = b.iter().sum::<f64>() / sm;
        let r: Vec<f64> = (1..self.n).map(|i| b[i] - mu * self.m[i]).collect();
        let y = self.chol.solve(&r);
        let mut x = Vec::with_capacity(self.n);
        x.push(0.0);
        x.extend(y);
        let shift = dot(&self.m, &x) / sm;
        x.iter_mut().for_each(|xi| *xi -= shift);
        (x, mu)
    }
}

/// Sharp forward and adjoint maps on the annulus mesh.
pub struct SharpSolver<'a> {
    pub ops: &'a SharpOperatorSet,
    inner: ConstrainedSolver,
}

impl<'a> SharpSolver<'a> {
    pub fn new(ops: &'a SharpOperatorSet) -> Result<Self, InversionError> {
        let inner = ConstrainedSolver::new(&ops.k_d, &ops.mean_vec_sharp)?;
        Ok(SharpSolver { ops, inner })
    }

    /// State for flux `u` on the inner circle (nodal vector; only inner
    /// boundary entries matter). Returns the field and its outer trace.
    pub fn forward(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (v, _) = self.inner.solve(&self.ops.t_inner.matvec(u));
        let f = restrict_to(&v, &self.ops.outer_nodes);
        (v, f)
    }

    /// Adjoint field for outer data `w`, and its inner trace.
    pub fn adjoint(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (p, _) = self.inner.solve(&self.ops.t_outer.matvec(w));
        let u = restrict_to(&p, &self.ops.inner_nodes);
        (p, u)
    }
}

/// Copy of `x` that is zero outside `idx`.
pub fn restrict_to(x: &[f64], idx: &[usize]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for &i in idx {
        y[i] = x[i];
    }
    y
}

pub fn sharp_forward(ops: &SharpOperatorSet, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>), InversionError> {
    Ok(SharpSolver::new(ops)?.forward(u))
}

pub fn sharp_adjoint(ops: &SharpOperatorSet, w: &[f64]) -> Result<(Vec<f64>, Vec<f64>), InversionError> {
    Ok(SharpSolver::new(ops)?.adjoint(w))
}

/// Diffuse forward problem on the active state set: `K v + mu m = B_H u`,
/// `m^T v = 0`. Input and output are full nodal vectors.
pub fn diffuse_forward(ops: &OperatorSet, u: &[f64]) -> Result<Vec<f64>, InversionError> {
    let av = &ops.active_v;
    let k = ops.k_omega.restrict(av, av);
    let m: Vec<f64> = av.iter().map(|&i| ops.mean_vec[i]).collect();
    let bu = ops.b_h.matvec(u);
    let b: Vec<f64> = av.iter().map(|&i| bu[i]).collect();
    let (x, _) = ConstrainedSolver::new(&k, &m)?.solve(&b);
    let mut v = vec![0.0; u.len()];
    for (k, &i) in av.iter().enumerate() {
        v[i] = x[k];
    }
    Ok(v)
}

/// Density of the source condition on the outer circle as a finite
/// cosine/sine series without constant term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSeries {
    /// `(k, a_k)`: terms `a_k cos(k theta)`.
    #[serde(default)]
    pub cos: Vec<(u32, f64)>,
    /// `(k, b_k)`: terms `b_k sin(k theta)`.
    #[serde(default)]
    pub sin: Vec<(u32, f64)>,
}

impl FourierSeries {
    pub fn eval(&self, theta: f64) -> f64 {
        let c: f64 = self.cos.iter().map(|&(k, a)| a * (k as f64 * theta).cos()).sum();
        let s: f64 = self.sin.iter().map(|&(k, b)| b * (k as f64 * theta).sin()).sum();
        c + s
    }

    fn map(&self, f: impl Fn(u32) -> f64) -> FourierSeries {
        FourierSeries {
            cos: self.cos.iter().map(|&(k, a)| (k, a * f(k))).collect(),
            sin: self.sin.iter().map(|&(k, b)| (k, b * f(k))).collect(),
        }
    }
}

/// Separable solution of the anisotropic annulus problem.
///
/// For the polar-frame tensor with radial eigenvalue `a_r` and tangential
/// `a_t`, mode `k` of the state is `A (r^s + r_out^{2s} r^{-s})` with
/// `s = k sqrt(a_t / a_r)`, zero flux on the outer circle and unit flux on
/// the inner one.
#[derive(Debug, Clone, Copy)]
pub struct ModalSolution {
    pub geometry: AnnulusGeometry,
    pub tensor: ConductivityTensor,
}

impl ModalSolution {
    fn exponent(&self, k: u32) -> f64 {
        k as f64 * (self.tensor.tangential / self.tensor.radial).sqrt()
    }

    /// Coefficient `A` of mode `k` for unit flux amplitude.
    fn amplitude(&self, k: u32) -> f64 {
        let s = self.exponent(k);
        let (r0, r1) = (self.geometry.r_inner, self.geometry.r_outer);
        1.0 / (self.tensor.radial * s * (r1.powf(2.0 * s) * r0.powf(-s - 1.0) - r0.powf(s - 1.0)))
    }

    /// Radial profile of mode `k` for unit flux amplitude.
    pub fn radial(&self, k: u32, r: f64) -> f64 {
        let s = self.exponent(k);
        let r1 = self.geometry.r_outer;
        self.amplitude(k) * (r.powf(s) + r1.powf(2.0 * s) * r.powf(-s))
    }

    /// Forward factor: outer trace amplitude per unit flux amplitude.
    pub fn forward_factor(&self, k: u32) -> f64 {
        self.radial(k, self.geometry.r_outer)
    }

    /// Adjoint factor in the boundary L2 products.
    pub fn adjoint_factor(&self, k: u32) -> f64 {
        self.forward_factor(k) * self.geometry.r_outer / self.geometry.r_inner
    }
}

/// Analytic ground truth `u = F* w`, `f = F u`, and the state field.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub w: FourierSeries,
    pub u_dagger: FourierSeries,
    pub f_dagger: FourierSeries,
    pub modal: ModalSolution,
}

impl GroundTruth {
    pub fn new(w: FourierSeries, geometry: AnnulusGeometry, tensor: ConductivityTensor) -> Result<Self, InversionError> {
        if w.cos.iter().chain(&w.sin).any(|&(k, _)| k == 0) {
            return Err(InversionError::Invalid("source density must be mean free".into()));
        }
        let modal = ModalSolution { geometry, tensor };
        let u_dagger = w.map(|k| modal.adjoint_factor(k));
        let f_dagger = u_dagger.map(|k| modal.forward_factor(k));
        Ok(GroundTruth { w, u_dagger, f_dagger, modal })
    }

    pub fn u(&self, theta: f64) -> f64 {
        self.u_dagger.eval(theta)
    }

    pub fn f(&self, theta: f64) -> f64 {
        self.f_dagger.eval(theta)
    }

    /// State field, defined for every `x != 0`.
    pub fn v(&self, x: [f64; 2]) -> f64 {
        let r = norm(x);
        let t = x[1].atan2(x[0]);
        let c: f64 =
            self.u_dagger.cos.iter().map(|&(k, a)| a * self.modal.radial(k, r) * (k as f64 * t).cos()).sum();
        let s: f64 =
            self.u_dagger.sin.iter().map(|&(k, b)| b * self.modal.radial(k, r) * (k as f64 * t).sin()).sum();
        c + s
    }

    /// `||u||^2` on the inner circle.
    pub fn u_norm_sq(&self) -> f64 {
        series_norm_sq(&self.u_dagger) * PI * self.modal.geometry.r_inner
    }

    /// `||f||^2` on the outer circle.
    pub fn f_norm_sq(&self) -> f64 {
        series_norm_sq(&self.f_dagger) * PI * self.modal.geometry.r_outer
    }
}

fn series_norm_sq(s: &FourierSeries) -> f64 {
    s.cos.iter().chain(&s.sin).map(|&(_, a)| a * a).sum()
}

pub fn angle(x: [f64; 2]) -> f64 {
    x[1].atan2(x[0])
}

/// Samples at the angles `2 pi i / n`, interpolated linearly and
/// periodically.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularSamples {
    pub values: Vec<f64>,
}

impl AngularSamples {
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Self {
        AngularSamples { values: (0..n).map(|i| f(2.0 * PI * i as f64 / n as f64)).collect() }
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let n = self.values.len();
        let t = theta.rem_euclid(2.0 * PI) / (2.0 * PI) * n as f64;
        let i = (t.floor() as usize).min(n - 1);
        let s = t - i as f64;
        (1.0 - s) * self.values[i] + s * self.values[(i + 1) % n]
    }
}

/// Nodal outer-boundary data of a sharp annulus mesh as angular samples.
/// The mesh must list the outer ring in angular order.
pub fn outer_samples(mesh: &TriMesh, ops: &SharpOperatorSet, f: &[f64]) -> AngularSamples {
    let mut nodes: Vec<(f64, f64)> =
        ops.outer_nodes.iter().map(|&i| (angle(mesh.vertices[i]).rem_euclid(2.0 * PI), f[i])).collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    AngularSamples { values: nodes.into_iter().map(|(_, v)| v).collect() }
}

/// `f + eta` with Gaussian nodal `eta` on `nodes`, rescaled so that
/// `sqrt(eta^T T eta) = delta`.
pub fn add_noise(
    f_dagger: &[f64],
    t: &Csr,
    nodes: &[usize],
    delta: f64,
    seed: u64,
) -> Result<Vec<f64>, InversionError> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(InversionError::Invalid(format!("noise level {delta}")));
    }
    if delta == 0.0 {
        return Ok(f_dagger.to_vec());
    }
    if nodes.is_empty() {
        return Err(InversionError::Invalid("no boundary nodes for noise".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eta = vec![0.0; f_dagger.len()];
    for &i in nodes {
        eta[i] = StandardNormal.sample(&mut rng);
    }
    let scale = delta / t.quad_form(&eta).sqrt();
    Ok(f_dagger.iter().zip(&eta).map(|(f, e)| f + scale * e).collect())
}

/// Normal-constant extension of outer data onto the active B band nodes.
pub fn extend_data(samples: &AngularSamples, mesh: &TriMesh, ops: &OperatorSet) -> Vec<f64> {
    let d = ops.b_b.diagonal();
    let max = d.iter().fold(0.0f64, |m, &x| m.max(x));
    mesh.vertices
        .iter()
        .zip(&d)
        .map(|(&x, &di)| if di > 1e-14 * max { samples.eval(angle(x)) } else { 0.0 })
        .collect()
}

/// Normal-constant extension of a boundary function of the angle onto the
/// nodes where `diag` is non-negligible.
pub fn extend_function(mesh: &TriMesh, diag: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let max = diag.iter().fold(0.0f64, |m, &x| m.max(x));
    mesh.vertices
        .iter()
        .zip(diag)
        .map(|(&x, &di)| if di > 1e-14 * max { f(angle(x)) } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub rho: f64,
    pub max_iter: usize,
    pub mode: PrecondMode,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { rho: 1e-10, max_iter: 5000, mode: PrecondMode::Exact }
    }
}

pub fn diffuse_tikhonov(
    ops: &OperatorSet,
    alpha: f64,
    f_tilde: &[f64],
    settings: &SolverSettings,
) -> Result<(SaddleSolution, SolveReport), InversionError> {
    let prec = RieszPreconditioner::diffuse(ops, settings.mode)?;
    diffuse_tikhonov_with(ops, &prec, alpha, f_tilde, settings)
}

/// As `diffuse_tikhonov` with a prebuilt preconditioner.
pub fn diffuse_tikhonov_with(
    ops: &OperatorSet,
    prec: &RieszPreconditioner,
    alpha: f64,
    f_tilde: &[f64],
    settings: &SolverSettings,
) -> Result<(SaddleSolution, SolveReport), InversionError> {
    let sys = build_system(ops, alpha, f_tilde)?;
    let rep = minres(&sys, prec, settings.rho, settings.max_iter)?;
    let sol = sys.unpack(&rep.solution, &ops.active_u, &ops.active_v, f_tilde.len());
    Ok((sol, rep))
}

pub fn sharp_tikhonov(
    ops: &SharpOperatorSet,
    alpha: f64,
    f_delta: &[f64],
    settings: &SolverSettings,
) -> Result<(SaddleSolution, SolveReport), InversionError> {
    let prec = RieszPreconditioner::sharp(ops, settings.mode)?;
    let sys = build_sharp_system(ops, alpha, f_delta)?;
    let rep = minres(&sys, &prec, settings.rho, settings.max_iter)?;
    let n = f_delta.len();
    let all: Vec<usize> = (0..n).collect();
    let sol = sys.unpack(&rep.solution, &ops.inner_nodes, &all, n);
    Ok((sol, rep))
}

/// `||v - f||^2 + alpha ||u||^2` in the given data and control products.
pub fn tikhonov_value(b_data: &Csr, b_control: &Csr, alpha: f64, u: &[f64], v: &[f64], f: &[f64]) -> f64 {
    let r: Vec<f64> = v.iter().zip(f).map(|(a, b)| a - b).collect();
    b_data.quad_form(&r) + alpha * b_control.quad_form(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorNorms {
    pub u_err_band: f64,
    pub v_err_band: f64,
    pub grad_err: f64,
    pub u_err_dual: f64,
    pub u_err_sharp: Option<f64>,
}

/// Evaluates the error norms of diffuse solutions against the extended
/// ground truth.
pub struct ErrorEvaluator<'a> {
    pub ops: &'a OperatorSet,
    pub u_ext: Vec<f64>,
    pub f_ext: Vec<f64>,
    pub v_interp: Vec<f64>,
    riesz: Cholesky,
}

impl<'a> ErrorEvaluator<'a> {
    pub fn new(ops: &'a OperatorSet, mesh: &TriMesh, truth: &GroundTruth) -> Result<Self, InversionError> {
        let av = &ops.active_v;
        let r = ops.k_omega.add_scaled(1.0, &ops.m_omega, 1.0).restrict(av, av);
        let riesz = Cholesky::factor(&r)?;
        let u_ext = extend_function(mesh, &ops.b_h.diagonal(), |t| truth.u(t));
        let f_ext = extend_function(mesh, &ops.b_b.diagonal(), |t| truth.f(t));
        let v_interp = mesh
            .vertices
            .iter()
            .map(|&x| if norm(x) > 0.0 { truth.v(x) } else { 0.0 })
            .collect();
        Ok(ErrorEvaluator { ops, u_ext, f_ext, v_interp, riesz })
    }

    /// `sqrt(g^T R^{-1} g)` for a nodal functional `g`, with `R` the state
    /// Riesz matrix on the active set.
    pub fn dual_norm(&self, g: &[f64]) -> f64 {
        let ga: Vec<f64> = self.ops.active_v.iter().map(|&i| g[i]).collect();
        dot(&ga, &self.riesz.solve(&ga)).max(0.0).sqrt()
    }

    /// Norm of `v` in the state Riesz product on the active set.
    pub fn h_norm(&self, v: &[f64]) -> f64 {
        (self.ops.k_omega.quad_form(v) + self.ops.m_omega.quad_form(v)).max(0.0).sqrt()
    }

    pub fn evaluate(&self, sol: &SaddleSolution) -> ErrorNorms {
        let du: Vec<f64> = sol.u.iter().zip(&self.u_ext).map(|(a, b)| a - b).collect();
        let dv: Vec<f64> = sol.v.iter().zip(&self.f_ext).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = sol.v.iter().zip(&self.v_interp).map(|(a, b)| a - b).collect();
        ErrorNorms {
            u_err_band: self.ops.b_h.quad_form(&du).max(0.0).sqrt(),
            v_err_band: self.ops.b_b.quad_form(&dv).max(0.0).sqrt(),
            grad_err: self.ops.k_omega.quad_form(&dg).max(0.0).sqrt(),
            u_err_dual: self.dual_norm(&self.ops.b_h.matvec(&du)),
            u_err_sharp: None,
        }
    }
}

pub fn error_norms(
    sol: &SaddleSolution,
    truth: &GroundTruth,
    ops: &OperatorSet,
    mesh: &TriMesh,
) -> Result<ErrorNorms, InversionError> {
    Ok(ErrorEvaluator::new(ops, mesh, truth)?.evaluate(sol))
}

/// Error norms of a sharp solution; band norms are replaced by boundary
/// norms on the two circles.
pub fn sharp_error_norms(sol: &SaddleSolution, truth: &GroundTruth, ops: &SharpOperatorSet, mesh: &TriMesh) -> ErrorNorms {
    let du: Vec<f64> = ops
        .inner_nodes
        .iter()
        .fold(vec![0.0; mesh.n_vertices()], |mut d, &i| {
            d[i] = sol.u[i] - truth.u(angle(mesh.vertices[i]));
            d
        });
    let dv: Vec<f64> = ops
        .outer_nodes
        .iter()
        .fold(vec![0.0; mesh.n_vertices()], |mut d, &i| {
            d[i] = sol.v[i] - truth.f(angle(mesh.vertices[i]));
            d
        });
    let dg: Vec<f64> = mesh.vertices.iter().zip(&sol.v).map(|(&x, v)| v - truth.v(x)).collect();
    let ue = ops.t_inner.quad_form(&du).max(0.0).sqrt();
    ErrorNorms {
        u_err_band: ue,
        v_err_band: ops.t_outer.quad_form(&dv).max(0.0).sqrt(),
        grad_err: ops.k_d.quad_form(&dg).max(0.0).sqrt(),
        u_err_dual: f64::NAN,
        u_err_sharp: Some(ue),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_sharp;
    use crate::mesh::mesh_annulus;

    #[test]
    fn modal_solution_satisfies_flux_conditions() {
        let m = ModalSolution { geometry: AnnulusGeometry::default(), tensor: ConductivityTensor::default() };
        for k in 1..4 {
            let h = 1e-6;
            let d0 = (m.radial(k, 0.3 + h) - m.radial(k, 0.3 - h)) / (2.0 * h);
            let d1 = (m.radial(k, 1.0 + h) - m.radial(k, 1.0 - h)) / (2.0 * h);
            assert!((-0.3 * d0 - 1.0).abs() < 1e-6, "k {k}: {}", -0.3 * d0);
            assert!(d1.abs() < 1e-6);
        }
    }

    #[test]
    fn angular_interpolation() {
        let s = AngularSamples::from_fn(64, f64::cos);
        assert!(s.eval(PI / 2.0).abs() < 1e-12);
        assert!((s.eval(-2.0 * PI / 64.0) - (2.0 * PI / 64.0).cos()).abs() < 1e-14);
    }

    #[test]
    fn noise_is_exact_and_seeded() {
        let g = AnnulusGeometry::default();
        let mesh = mesh_annulus(&g, 32, 4).unwrap();
        let ops = assemble_sharp(&mesh, &ConductivityTensor::default()).unwrap();
        let f = vec![0.5; mesh.n_vertices()];
        let a = add_noise(&f, &ops.t_outer, &ops.outer_nodes, 0.01, 7).unwrap();
        let b = add_noise(&f, &ops.t_outer, &ops.outer_nodes, 0.01, 7).unwrap();
        let c = add_noise(&f, &ops.t_outer, &ops.outer_nodes, 0.01, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let d: Vec<f64> = a.iter().zip(&f).map(|(x, y)| x - y).collect();
        assert!((ops.t_outer.quad_form(&d).sqrt() / 0.01 - 1.0).abs() < 1e-14);
        assert_eq!(add_noise(&f, &ops.t_outer, &ops.outer_nodes, 0.0, 7).unwrap(), f);
    }

    #[test]
    fn sharp_forward_of_zero_is_zero() {
        let g = AnnulusGeometry::default();
        let mesh = mesh_annulus(&g, 32, 4).unwrap();
        let ops = assemble_sharp(&mesh, &ConductivityTensor::default()).unwrap();
        let (v, f) = sharp_forward(&ops, &vec![0.0; mesh.n_vertices()]).unwrap();
        assert!(v.iter().chain(&f).all(|&x| x == 0.0));
    }
}
