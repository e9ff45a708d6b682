//! Experiment harness: configuration, sweeps over regularization and
//! interface width, rate and spectrum studies, slope fits and output files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble_operators, assemble_sharp, interface_defect, diffuse_functional, AssemblyError, FunctionalKind, OperatorSet, SharpOperatorSet};
use crate::geometry::{norm, AnnulusGeometry, ConductivityTensor, GeometryError, Interface, PhaseField};
use crate::inversion::{
    add_noise, angle, diffuse_forward, diffuse_tikhonov_with, extend_data, outer_samples, sharp_error_norms,
    sharp_tikhonov, ErrorEvaluator, ErrorNorms, FourierSeries, GroundTruth, InversionError, SharpSolver,
    SolverSettings,
};
use crate::mesh::{build_background_with, mesh_annulus, quadrature, refine_band, MeshError, Pattern, TriMesh, DEFAULT_VERTEX_CAP};
use crate::saddle_solver::{build_system_any_alpha, spectrum, PrecondMode, RieszPreconditioner, SolverError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid fit input: {0}")]
    Fit(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub r_inner: f64,
    pub r_outer: f64,
    pub split_radius: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let g = AnnulusGeometry::default();
        GeometryConfig { r_inner: g.r_inner, r_outer: g.r_outer, split_radius: g.split_radius }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TensorConfig {
    pub tangential: f64,
    pub radial: f64,
}

impl Default for TensorConfig {
    fn default() -> Self {
        let t = ConductivityTensor::default();
        TensorConfig { tangential: t.tangential, radial: t.radial }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Background spacing of the box mesh.
    pub h0: f64,
    /// Band refinement levels (a lower bound when `band_cells` is set).
    pub levels: u32,
    /// If set, refine until the band holds this many cells per `eps`.
    pub band_cells: Option<f64>,
    pub pattern: Pattern,
    pub quad_degree: u32,
    pub quad_subdivision: u32,
    /// Polar resolution of the sharp annulus mesh.
    pub sharp_angular: usize,
    pub sharp_radial: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            h0: 0.1,
            levels: 0,
            band_cells: Some(2.0),
            pattern: Pattern::Split2,
            quad_degree: 2,
            quad_subdivision: 1,
            sharp_angular: 256,
            sharp_radial: 64,
        }
    }
}

impl MeshConfig {
    /// Spacing of the background grid actually used.
    pub fn spacing(&self) -> f64 {
        let n = ((3.0 / self.h0) - 1e-9).ceil().max(1.0);
        3.0 / n
    }

    pub fn levels_for(&self, epsilon: f64) -> u32 {
        match self.band_cells {
            Some(c) => {
                let l = (self.spacing() * c / epsilon).log2().ceil().max(0.0) as u32;
                l.max(self.levels)
            }
            None => self.levels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub rho: f64,
    pub max_iter: usize,
    pub mode: PrecondMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverConfig { rho: s.rho, max_iter: s.max_iter, mode: s.mode }
    }
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings { rho: self.rho, max_iter: self.max_iter, mode: self.mode }
    }
}

/// `coefficient * delta^exponent`. Coefficient and exponent both zero
/// select the sharp annulus mesh when used as an interface-width rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub coefficient: f64,
    pub exponent: f64,
}

impl Rule {
    pub fn eval(&self, delta: f64) -> f64 {
        self.coefficient * delta.powf(self.exponent)
    }

    pub fn is_sharp(&self) -> bool {
        self.coefficient == 0.0 && self.exponent == 0.0
    }

    pub fn label(&self) -> String {
        if self.is_sharp() {
            "sharp".into()
        } else {
            format!("{}*delta^{}", self.coefficient, self.exponent)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Study {
    IterationTable {
        alphas: Vec<f64>,
        epsilons: Vec<f64>,
        delta: f64,
    },
    RateStudy {
        deltas: Vec<f64>,
        alpha_rule: Rule,
        epsilon_rules: Vec<Rule>,
        /// Fit only the `window` smallest noise levels, all if absent.
        #[serde(default)]
        window: Option<usize>,
    },
    Spectrum {
        alphas: Vec<f64>,
        epsilon: f64,
        #[serde(default = "default_cap")]
        cap: usize,
        /// Relative gap that separates two eigenvalue clusters.
        #[serde(default = "default_jump")]
        jump: f64,
    },
    Solve {
        delta: f64,
        alpha: f64,
        /// Zero selects the sharp mesh.
        epsilon: f64,
    },
    Verify {
        band_epsilons: Vec<f64>,
        integral_epsilons: Vec<f64>,
        perturbation_epsilons: Vec<f64>,
        adjoint_pairs: usize,
    },
}

fn default_cap() -> usize {
    2000
}

fn default_jump() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub tensor: TensorConfig,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Source density `w` of the ground truth.
    #[serde(default = "default_truth")]
    pub truth: FourierSeries,
    pub study: Study,
}

fn default_truth() -> FourierSeries {
    FourierSeries { cos: vec![(2, 1.0)], sin: vec![(3, 0.5)] }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn geometry(&self) -> Result<AnnulusGeometry, ExperimentError> {
        let g = &self.geometry;
        Ok(AnnulusGeometry::new(g.r_inner, g.r_outer, g.split_radius)?)
    }

    pub fn tensor(&self) -> Result<ConductivityTensor, ExperimentError> {
        Ok(ConductivityTensor::new(self.tensor.tangential, self.tensor.radial)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.geometry()?;
        self.tensor()?;
        let m = &self.mesh;
        if !(m.h0 > 0.0 && m.h0.is_finite()) {
            return bad(format!("mesh.h0 = {}", m.h0));
        }
        if let Some(c) = m.band_cells {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("mesh.band_cells = {c}"));
            }
        }
        if m.sharp_angular < 8 || m.sharp_radial < 2 {
            return bad("sharp mesh needs at least 8 x 2 cells".into());
        }
        if !(self.solver.rho > 0.0 && self.solver.rho < 1.0) || self.solver.max_iter == 0 {
            return bad(format!("solver rho = {}, max_iter = {}", self.solver.rho, self.solver.max_iter));
        }
        if self.truth.cos.is_empty() && self.truth.sin.is_empty() {
            return bad("truth series is empty".into());
        }
        match &self.study {
            Study::IterationTable { alphas, epsilons, delta } => {
                if alphas.is_empty() || epsilons.is_empty() {
                    return bad("iteration table needs alphas and epsilons".into());
                }
                if alphas.iter().chain(epsilons).any(|&x| !(x > 0.0)) || !(*delta >= 0.0) {
                    return bad("alphas and epsilons must be positive, delta nonnegative".into());
                }
            }
            Study::RateStudy { deltas, alpha_rule, epsilon_rules, window } => {
                if deltas.is_empty() || epsilon_rules.is_empty() {
                    return bad("rate study needs deltas and epsilon rules".into());
                }
                if deltas.iter().any(|&d| !(d > 0.0)) || deltas.windows(2).any(|w| w[1] >= w[0]) {
                    return bad("deltas must be positive and decreasing".into());
                }
                for r in std::iter::once(alpha_rule).chain(epsilon_rules) {
                    if !(0.0..=1.0).contains(&r.exponent) || r.coefficient < 0.0 {
                        return bad(format!("rule {r:?}: exponent must lie in [0, 1]"));
                    }
                }
                if alpha_rule.coefficient <= 0.0 {
                    return bad("alpha rule needs a positive coefficient".into());
                }
                for r in epsilon_rules.iter().filter(|r| !r.is_sharp()) {
                    if r.coefficient <= 0.0 {
                        return bad(format!("epsilon rule {r:?}"));
                    }
                }
                if *window == Some(0) {
                    return bad("fit window must hold at least one point".into());
                }
            }
            Study::Spectrum { alphas, epsilon, jump, .. } => {
                if alphas.is_empty() || alphas.iter().any(|&a| !(a >= 0.0)) || !(*epsilon > 0.0) || !(*jump > 1.0) {
                    return bad("spectrum needs alphas >= 0, epsilon > 0 and jump > 1".into());
                }
            }
            Study::Solve { delta, alpha, epsilon } => {
                if !(*delta >= 0.0 && *alpha > 0.0 && *epsilon >= 0.0) {
                    return bad("solve needs delta >= 0, alpha > 0, epsilon >= 0".into());
                }
            }
            Study::Verify { band_epsilons, integral_epsilons, perturbation_epsilons, .. } => {
                if band_epsilons.is_empty() || integral_epsilons.len() < 2 || perturbation_epsilons.len() < 2 {
                    return bad("verify needs nonempty epsilon lists".into());
                }
            }
        }
        Ok(())
    }
}

const FIG7: &str = r#"# Rates for alpha = delta / 2 with eps = 0.25 delta^nu.
seed = 1
output_dir = "out/fig7"

[mesh]
h0 = 0.1
band_cells = 2.0
sharp_angular = 256
sharp_radial = 64

[solver]
rho = 1e-10
max_iter = 5000
mode = "exact"

[truth]
cos = [[1, 0.1]]

[study]
kind = "rate_study"
deltas = [0.0625, 0.03125, 0.015625, 0.0078125, 0.00390625, 0.001953125, 0.0009765625]
alpha_rule = { coefficient = 0.5, exponent = 1.0 }
epsilon_rules = [
    { coefficient = 0.0, exponent = 0.0 },
    { coefficient = 0.25, exponent = 0.5 },
    { coefficient = 0.25, exponent = 0.6666666666666666 },
    { coefficient = 0.25, exponent = 0.3333333333333333 },
]
"#;

const FIG8: &str = r#"# Rates for alpha = 2 delta^(2/3) with eps = C delta^nu.
seed = 1
output_dir = "out/fig8"

[mesh]
h0 = 0.1
band_cells = 2.0
sharp_angular = 256
sharp_radial = 64

[solver]
rho = 1e-10
max_iter = 5000
mode = "exact"

[truth]
cos = [[1, 0.1]]

[study]
kind = "rate_study"
deltas = [4.8828125e-4, 2.44140625e-4, 1.220703125e-4, 6.103515625e-5, 3.0517578125e-5, 1.52587890625e-5, 7.62939453125e-6]
alpha_rule = { coefficient = 2.0, exponent = 0.6666666666666666 }
epsilon_rules = [
    { coefficient = 0.0, exponent = 0.0 },
    { coefficient = 35.0, exponent = 0.6666666666666666 },
    { coefficient = 10.0, exponent = 0.5 },
    { coefficient = 2.8, exponent = 0.3333333333333333 },
]
window = 3
"#;

const TABLE1: &str = r#"# MINRES iterations over alpha and eps.
seed = 1
output_dir = "out/table1"

[mesh]
h0 = 0.1
band_cells = 2.0

[solver]
rho = 1e-10
max_iter = 5000
mode = "exact"

[study]
kind = "iteration_table"
alphas = [1.0, 0.1, 0.01, 0.001, 0.0001]
epsilons = [0.25, 0.125, 0.0625, 0.03125, 0.015625]
delta = 0.0009765625
"#;

const SPECTRUM: &str = r#"# Preconditioned spectrum on a coarse mesh.
seed = 1
output_dir = "out/spectrum"

[mesh]
h0 = 0.3
levels = 0
band_cells = 1.0

[study]
kind = "spectrum"
alphas = [0.0001, 0.0]
epsilon = 0.125
cap = 2000
jump = 2.0
"#;

const VERIFY: &str = r#"# Property checks of the diffuse approximation.
seed = 1
output_dir = "out/verify"

[mesh]
h0 = 0.1
band_cells = 2.0
sharp_angular = 64
sharp_radial = 12

[study]
kind = "verify"
band_epsilons = [0.25, 0.125, 0.0625, 0.03125, 0.015625]
integral_epsilons = [0.125, 0.0625, 0.03125, 0.015625, 0.0078125]
perturbation_epsilons = [0.125, 0.0625, 0.03125, 0.015625]
adjoint_pairs = 10
"#;

/// Names of the shipped presets.
pub const PRESETS: [&str; 5] = ["fig7", "fig8", "table1", "spectrum", "verify"];

/// Config text of a named preset.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "fig7" => Some(FIG7),
        "fig8" => Some(FIG8),
        "table1" => Some(TABLE1),
        "spectrum" => Some(SPECTRUM),
        "verify" => Some(VERIFY),
        _ => None,
    }
}

/// Applies `key.path=value` overrides to config text. Values are parsed
/// as TOML and fall back to strings.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String, ExperimentError> {
    if overrides.is_empty() {
        return Ok(text.to_string());
    }
    let mut doc: toml::Table = toml::from_str(text)?;
    for o in overrides {
        let (key, raw) =
            o.split_once('=').ok_or_else(|| ExperimentError::Config(format!("override `{o}` lacks `=`")))?;
        let value = parse_value(raw.trim());
        let path: Vec<&str> = key.trim().split('.').collect();
        let mut table = &mut doc;
        for p in &path[..path.len() - 1] {
            let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| ExperimentError::Config(format!("`{p}` in `{key}` is not a section")))?;
        }
        table.insert(path[path.len() - 1].to_string(), value);
    }
    toml::to_string(&doc).map_err(|e| ExperimentError::Config(e.to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Least squares fit of `log error` against `log delta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Fewer than two points: slope, intercept and r^2 are NaN.
    pub undefined: bool,
}

/// Fits the last `window` points (all when `None`).
pub fn fit_loglog_slope(points: &[(f64, f64)], window: Option<usize>) -> Result<RateFit, ExperimentError> {
    let start = window.map_or(0, |w| points.len().saturating_sub(w));
    let pts = points[start..].to_vec();
    if let Some(p) = pts.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(ExperimentError::Fit(format!("nonpositive point {p:?}")));
    }
    if pts.len() < 2 {
        return Ok(RateFit { points: pts, slope: f64::NAN, intercept: f64::NAN, r_squared: f64::NAN, undefined: true });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(ExperimentError::Fit("all abscissae coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit { points: pts, slope, intercept, r_squared, undefined: false })
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, r^2)`.
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let b = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (my - b * mx, b, r2)
}

/// Diffuse discretization of one interface width.
pub struct DiffuseSetup {
    pub field: PhaseField,
    pub levels: u32,
    pub mesh: TriMesh,
    pub ops: OperatorSet,
}

pub fn diffuse_setup(cfg: &ExperimentConfig, epsilon: f64) -> Result<DiffuseSetup, ExperimentError> {
    let field = PhaseField::new(cfg.geometry()?, epsilon)?;
    let levels = cfg.mesh.levels_for(epsilon);
    let base = build_background_with(cfg.mesh.h0, cfg.mesh.pattern, DEFAULT_VERTEX_CAP)?;
    let mesh = refine_band(&base, &field, levels)?;
    let rule = quadrature(cfg.mesh.quad_degree, cfg.mesh.quad_subdivision)?;
    let ops = assemble_operators(&mesh, &cfg.tensor()?, &field, &rule)?;
    Ok(DiffuseSetup { field, levels, mesh, ops })
}

/// Sharp annulus discretization; also the grid of the measured data.
pub struct SharpSetup {
    pub mesh: TriMesh,
    pub ops: SharpOperatorSet,
}

pub fn sharp_setup(cfg: &ExperimentConfig) -> Result<SharpSetup, ExperimentError> {
    let mesh = mesh_annulus(&cfg.geometry()?, cfg.mesh.sharp_angular, cfg.mesh.sharp_radial)?;
    let ops = assemble_sharp(&mesh, &cfg.tensor()?)?;
    Ok(SharpSetup { mesh, ops })
}

pub fn ground_truth(cfg: &ExperimentConfig) -> Result<GroundTruth, ExperimentError> {
    Ok(GroundTruth::new(cfg.truth.clone(), cfg.geometry()?, cfg.tensor()?)?)
}

/// Noisy nodal data on the outer ring of the sharp mesh.
pub fn noisy_data(sharp: &SharpSetup, truth: &GroundTruth, delta: f64, seed: u64) -> Result<Vec<f64>, ExperimentError> {
    let mut f = vec![0.0; sharp.mesh.n_vertices()];
    for &i in &sharp.ops.outer_nodes {
        f[i] = truth.f(angle(sharp.mesh.vertices[i]));
    }
    Ok(add_noise(&f, &sharp.ops.t_outer, &sharp.ops.outer_nodes, delta, seed)?)
}

/// One solve of a sweep with its full parameter tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub schedule: String,
    pub delta: f64,
    pub alpha: f64,
    /// Zero for the sharp mesh.
    pub epsilon: f64,
    pub h0: f64,
    pub levels: u32,
    pub rho: f64,
    pub mode: PrecondMode,
    pub seed: u64,
    pub iters: usize,
    pub converged: bool,
    pub norms: ErrorNorms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub schedule: String,
    pub quantity: String,
    pub fit: RateFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub epsilon: f64,
    pub alpha: f64,
    pub delta: f64,
    pub levels: u32,
    pub iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub label: String,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandSummary {
    pub alpha: f64,
    pub epsilon: f64,
    pub dim: usize,
    pub neg_min: f64,
    pub neg_max: f64,
    pub small_min: f64,
    pub small_max: f64,
    pub large_min: f64,
    pub large_max: f64,
    /// Eigenvalues outside the three main clusters.
    pub isolated: usize,
    pub min_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumResult {
    pub summary: BandSummary,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub parameter: f64,
    pub value: f64,
    pub reference: f64,
    pub passed: bool,
}

/// Everything a study produces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyResults {
    pub table: Vec<TableCell>,
    pub rates: Vec<RateRow>,
    pub fits: Vec<FitRow>,
    pub spectra: Vec<SpectrumResult>,
    pub checks: Vec<Check>,
    pub residuals: Vec<ResidualTrace>,
}

impl StudyResults {
    /// Exit status of the run: every solve converged and every check passed.
    pub fn success(&self) -> bool {
        self.table.iter().all(|c| c.converged)
            && self.rates.iter().all(|r| r.converged)
            && self.checks.iter().all(|c| c.passed)
    }

    pub fn fit(&self, schedule: &str, quantity: &str) -> Option<&RateFit> {
        self.fits.iter().find(|f| f.schedule == schedule && f.quantity == quantity).map(|f| &f.fit)
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<StudyResults, ExperimentError> {
    match cfg.study {
        Study::IterationTable { .. } => run_iteration_table(cfg),
        Study::RateStudy { .. } | Study::Solve { .. } => run_rate_study(cfg),
        Study::Spectrum { .. } => run_spectrum_study(cfg),
        Study::Verify { .. } => run_verify(cfg),
    }
}

pub fn run_iteration_table(cfg: &ExperimentConfig) -> Result<StudyResults, ExperimentError> {
    let Study::IterationTable { alphas, epsilons, delta } = &cfg.study else {
        return Err(ExperimentError::Config("study is not an iteration table".into()));
    };
    let truth = ground_truth(cfg)?;
    let sharp = sharp_setup(cfg)?;
    let f = noisy_data(&sharp, &truth, *delta, cfg.seed)?;
    let samples = outer_samples(&sharp.mesh, &sharp.ops, &f);
    let settings = cfg.solver.settings();
    let mut out = StudyResults::default();
    for &eps in epsilons {
        let d = diffuse_setup(cfg, eps)?;
        let f_tilde = extend_data(&samples, &d.mesh, &d.ops);
        let prec = RieszPreconditioner::diffuse(&d.ops, settings.mode)?;
        for &alpha in alphas {
            let (_, rep) = diffuse_tikhonov_with(&d.ops, &prec, alpha, &f_tilde, &settings)?;
            out.table.push(TableCell { epsilon: eps, alpha, delta: *delta, levels: d.levels, iters: rep.iterations, converged: rep.converged });
            out.residuals.push(ResidualTrace { label: format!("epsilon={eps:e} alpha={alpha:e}"), history: rep.residual_history });
        }
    }
    Ok(out)
}

/// Rate study, or a single solve when the study is `Solve`.
pub fn run_rate_study(cfg: &ExperimentConfig) -> Result<StudyResults, ExperimentError> {
    let (deltas, alpha_rule, eps_rules, window) = match &cfg.study {
        Study::RateStudy { deltas, alpha_rule, epsilon_rules, window } => {
            (deltas.clone(), *alpha_rule, epsilon_rules.clone(), *window)
        }
        Study::Solve { delta, alpha, epsilon } => {
            let rule = if *epsilon == 0.0 {
                Rule { coefficient: 0.0, exponent: 0.0 }
            } else {
                Rule { coefficient: *epsilon, exponent: 0.0 }
            };
            (vec![*delta], Rule { coefficient: *alpha, exponent: 0.0 }, vec![rule], None)
        }
        _ => return Err(ExperimentError::Config("study is not a rate study".into())),
    };
    let truth = ground_truth(cfg)?;
    let sharp = sharp_setup(cfg)?;
    let settings = cfg.solver.settings();
    let mut out = StudyResults::default();
    for rule in &eps_rules {
        let label = rule.label();
        for &delta in &deltas {
            let alpha = alpha_rule.eval(delta);
            let f = noisy_data(&sharp, &truth, delta, cfg.seed)?;
            let (row, trace) = if rule.is_sharp() {
                let (sol, rep) = sharp_tikhonov(&sharp.ops, alpha, &f, &settings)?;
                let norms = sharp_error_norms(&sol, &truth, &sharp.ops, &sharp.mesh);
                let row = RateRow {
                    schedule: label.clone(),
                    delta,
                    alpha,
                    epsilon: 0.0,
                    h0: cfg.mesh.h0,
                    levels: 0,
                    rho: settings.rho,
                    mode: settings.mode,
                    seed: cfg.seed,
                    iters: rep.iterations,
                    converged: rep.converged,
                    norms,
                };
                (row, rep.residual_history)
            } else {
                let eps = rule.eval(delta);
                let d = diffuse_setup(cfg, eps)?;
                let samples = outer_samples(&sharp.mesh, &sharp.ops, &f);
                let f_tilde = extend_data(&samples, &d.mesh, &d.ops);
                let prec = RieszPreconditioner::diffuse(&d.ops, settings.mode)?;
                let (sol, rep) = diffuse_tikhonov_with(&d.ops, &prec, alpha, &f_tilde, &settings)?;
                let norms = ErrorEvaluator::new(&d.ops, &d.mesh, &truth)?.evaluate(&sol);
                let row = RateRow {
                    schedule: label.clone(),
                    delta,
                    alpha,
                    epsilon: eps,
                    h0: cfg.mesh.h0,
                    levels: d.levels,
                    rho: settings.rho,
                    mode: settings.mode,
                    seed: cfg.seed,
                    iters: rep.iterations,
                    converged: rep.converged,
                    norms,
                };
                (row, rep.residual_history)
            };
            out.residuals.push(ResidualTrace { label: format!("{label} delta={delta:e}"), history: trace });
            out.rates.push(row);
        }
        let rows: Vec<&RateRow> = out.rates.iter().filter(|r| r.schedule == label).collect();
        let u_pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.delta, r.norms.u_err_sharp.unwrap_or(r.norms.u_err_band)))
            .collect();
        let v_pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.delta, r.norms.v_err_band)).collect();
        for (q, pts) in [("u_err", u_pts), ("v_err_band", v_pts)] {
            let fit = fit_loglog_slope(&pts, None)?;
            out.fits.push(FitRow { schedule: label.clone(), quantity: q.into(), fit });
            if let Some(w) = window {
                let fit = fit_loglog_slope(&pts, Some(w))?;
                out.fits.push(FitRow { schedule: label.clone(), quantity: format!("{q}_last{w}"), fit });
            }
        }
    }
    Ok(out)
}

/// Splits ascending positive values into clusters separated by a ratio
/// larger than `jump`.
fn clusters(sorted: &[f64], jump: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for &x in sorted {
        match out.last_mut() {
            Some(c) if x <= c.last().unwrap() * jump => c.push(x),
            _ => out.push(vec![x]),
        }
    }
    out
}

/// Band structure of a preconditioned spectrum: the negative band, the
/// lowest and the highest positive cluster; everything else counts as
/// isolated.
pub fn band_summary(eigenvalues: &[f64], alpha: f64, epsilon: f64, jump: f64) -> BandSummary {
    let mut neg: Vec<f64> = eigenvalues.iter().filter(|&&x| x < 0.0).map(|x| -x).collect();
    let mut pos: Vec<f64> = eigenvalues.iter().copied().filter(|&x| x > 0.0).collect();
    neg.sort_by(f64::total_cmp);
    pos.sort_by(f64::total_cmp);
    let nc = clusters(&neg, jump);
    let pc = clusters(&pos, jump);
    let (neg_min, neg_max, nb) = match nc.last() {
        Some(c) => (-c[c.len() - 1], -c[0], c.len()),
        None => (f64::NAN, f64::NAN, 0),
    };
    let (large_min, large_max, lb) = match pc.last() {
        Some(c) => (c[0], c[c.len() - 1], c.len()),
        None => (f64::NAN, f64::NAN, 0),
    };
    let (small_min, small_max, sb) = match pc.first() {
        Some(c) if pc.len() > 1 => (c[0], c[c.len() - 1], c.len()),
        _ => (f64::NAN, f64::NAN, 0),
    };
    let min_abs = eigenvalues.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    let zeros = eigenvalues.len() - neg.len() - pos.len();
    BandSummary {
        alpha,
        epsilon,
        dim: eigenvalues.len(),
        neg_min,
        neg_max,
        small_min,
        small_max,
        large_min,
        large_max,
        isolated: eigenvalues.len() - nb - lb - sb - zeros,
        min_abs,
    }
}

pub fn run_spectrum_study(cfg: &ExperimentConfig) -> Result<StudyResults, ExperimentError> {
    let Study::Spectrum { alphas, epsilon, cap, jump } = &cfg.study else {
        return Err(ExperimentError::Config("study is not a spectrum study".into()));
    };
    let d = diffuse_setup(cfg, *epsilon)?;
    let prec = RieszPreconditioner::diffuse(&d.ops, PrecondMode::Exact)?;
    let zero = vec![0.0; d.mesh.n_vertices()];
    let mut out = StudyResults::default();
    for &alpha in alphas {
        let sys = build_system_any_alpha(&d.ops, alpha, &zero)?;
        let eigenvalues = spectrum(&sys, &prec, *cap)?;
        let summary = band_summary(&eigenvalues, alpha, *epsilon, *jump);
        out.spectra.push(SpectrumResult { summary, eigenvalues });
    }
    Ok(out)
}

fn check(name: &str, parameter: f64, value: f64, reference: f64, passed: bool) -> Check {
    Check { name: name.into(), parameter, value, reference, passed }
}

/// Band measures, diffuse integral orders, adjoint consistency and the
/// operator perturbation order.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<StudyResults, ExperimentError> {
    let Study::Verify { band_epsilons, integral_epsilons, perturbation_epsilons, adjoint_pairs } = &cfg.study else {
        return Err(ExperimentError::Config("study is not a verify study".into()));
    };
    let geo = cfg.geometry()?;
    let rule = quadrature(cfg.mesh.quad_degree, cfg.mesh.quad_subdivision)?;
    let mut out = StudyResults::default();
    let base = build_background_with(cfg.mesh.h0, cfg.mesh.pattern, DEFAULT_VERTEX_CAP)?;

    for &eps in band_epsilons {
        let field = PhaseField::new(geo, eps)?;
        for (kind, which, name) in
            [(FunctionalKind::BandB, Interface::B, "band_measure_outer"), (FunctionalKind::BandH, Interface::H, "band_measure_inner")]
        {
            let v = diffuse_functional(&base, &field, |_| 1.0, kind, &rule);
            let r = 2.0 * std::f64::consts::PI * geo.radius(which);
            out.checks.push(check(name, eps, v, r, ((v - r) / r).abs() <= 1e-5));
        }
    }

    let mut inner = vec![];
    let mut outer = vec![];
    let mut quad = vec![];
    for &eps in integral_epsilons {
        let field = PhaseField::new(geo, eps)?;
        let oracle = std::f64::consts::PI * eps * eps / 3.0;
        let dh = interface_defect(&base, &field, |_| 1.0, Some(Interface::H), &rule);
        let db = interface_defect(&base, &field, |_| 1.0, Some(Interface::B), &rule);
        let dq = interface_defect(&base, &field, |x| norm(x).powi(2), None, &rule);
        out.checks.push(check("defect_inner_g1", eps, dh, -oracle, (dh + oracle).abs() <= 1e-3 * oracle));
        out.checks.push(check("defect_outer_g1", eps, db, oracle, (db - oracle).abs() <= 1e-3 * oracle));
        // Radial oracle for g = |x|^2: pi eps^2 (r_out^2 - r_in^2).
        let rq = std::f64::consts::PI * eps * eps * (geo.r_outer.powi(2) - geo.r_inner.powi(2));
        out.checks.push(check("defect_total_r2", eps, dq, rq, (dq - rq).abs() <= 1e-3 * rq));
        inner.push((eps, dh.abs()));
        outer.push((eps, db.abs()));
        quad.push((eps, dq.abs()));
    }
    for (name, pts) in [("order_inner_g1", inner), ("order_outer_g1", outer), ("order_total_r2", quad)] {
        let fit = fit_loglog_slope(&pts, None)?;
        out.checks.push(check(name, f64::NAN, fit.slope, 2.0, fit.slope >= 1.9));
        out.fits.push(FitRow { schedule: "verify".into(), quantity: name.into(), fit });
    }

    let sharp = sharp_setup(cfg)?;
    let solver = SharpSolver::new(&sharp.ops)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for _ in 0..*adjoint_pairs {
        use rand::Rng;
        let n = sharp.mesh.n_vertices();
        let mut u = vec![0.0; n];
        let mut w = vec![0.0; n];
        for &i in &sharp.ops.inner_nodes {
            u[i] = rng.random_range(-1.0..1.0);
        }
        for &i in &sharp.ops.outer_nodes {
            w[i] = rng.random_range(-1.0..1.0);
        }
        let (_, fu) = solver.forward(&u);
        let (_, fw) = solver.adjoint(&w);
        let lhs = sharp.ops.t_outer.bilinear(&fu, &w);
        let rhs = sharp.ops.t_inner.bilinear(&u, &fw);
        let scale = sharp.ops.t_inner.quad_form(&u).sqrt() * sharp.ops.t_outer.quad_form(&w).sqrt();
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    out.checks.push(check("adjoint_consistency", *adjoint_pairs as f64, worst, 1e-10, worst <= 1e-10));

    let truth = ground_truth(cfg)?;
    let mut pts = vec![];
    for &eps in perturbation_epsilons {
        let d = diffuse_setup(cfg, eps)?;
        let ev = ErrorEvaluator::new(&d.ops, &d.mesh, &truth)?;
        let v = diffuse_forward(&d.ops, &ev.u_ext)?;
        let diff: Vec<f64> = v.iter().zip(&ev.v_interp).map(|(a, b)| a - b).collect();
        let e = ev.h_norm(&diff);
        out.checks.push(check("perturbation_error", eps, e, f64::NAN, e.is_finite()));
        pts.push((eps, e));
    }
    let fit = fit_loglog_slope(&pts, None)?;
    out.checks.push(check("order_perturbation", f64::NAN, fit.slope, 1.5, fit.slope >= 1.2));
    out.fits.push(FitRow { schedule: "verify".into(), quantity: "order_perturbation".into(), fit });
    Ok(out)
}

fn e(x: f64) -> String {
    format!("{x:.12e}")
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<(), ExperimentError> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(io_err(&p))
}

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
    w.write_record(header).unwrap();
    for r in rows {
        w.write_record(&r).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub const RATES_HEADER: [&str; 16] = [
    "schedule", "delta", "alpha", "epsilon", "h0", "levels", "rho", "mode", "seed", "iters", "converged",
    "u_err_band", "v_err_band", "grad_err", "u_err_dual", "u_err_sharp",
];

/// Table in the layout rows = eps, columns = alpha. Non-converged cells
/// carry a trailing `!`.
pub fn table_csv(cells: &[TableCell]) -> String {
    let mut alphas: Vec<f64> = vec![];
    let mut eps: Vec<f64> = vec![];
    for c in cells {
        if !alphas.contains(&c.alpha) {
            alphas.push(c.alpha);
        }
        if !eps.contains(&c.epsilon) {
            eps.push(c.epsilon);
        }
    }
    alphas.sort_by(|a, b| b.total_cmp(a));
    eps.sort_by(|a, b| b.total_cmp(a));
    let mut header = vec!["epsilon".to_string()];
    header.extend(alphas.iter().map(|a| format!("alpha={a:e}")));
    let mut rows = vec![];
    for &x in &eps {
        let mut r = vec![e(x)];
        for &a in &alphas {
            r.push(match cells.iter().find(|c| c.epsilon == x && c.alpha == a) {
                Some(c) => format!("{}{}", c.iters, if c.converged { "" } else { "!" }),
                None => String::new(),
            });
        }
        rows.push(r);
    }
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    csv_text(&h, rows)
}

pub fn rates_csv(rows: &[RateRow]) -> String {
    let mut sorted: Vec<&RateRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.schedule.cmp(&b.schedule).then(b.delta.total_cmp(&a.delta)));
    let body = sorted
        .iter()
        .map(|r| {
            vec![
                r.schedule.clone(),
                e(r.delta),
                e(r.alpha),
                e(r.epsilon),
                e(r.h0),
                r.levels.to_string(),
                e(r.rho),
                r.mode.as_str().into(),
                r.seed.to_string(),
                r.iters.to_string(),
                r.converged.to_string(),
                e(r.norms.u_err_band),
                e(r.norms.v_err_band),
                e(r.norms.grad_err),
                e(r.norms.u_err_dual),
                r.norms.u_err_sharp.map(e).unwrap_or_default(),
            ]
        })
        .collect();
    csv_text(&RATES_HEADER, body)
}

pub fn fits_csv(fits: &[FitRow]) -> String {
    let body = fits
        .iter()
        .map(|f| {
            vec![
                f.schedule.clone(),
                f.quantity.clone(),
                f.fit.points.len().to_string(),
                e(f.fit.slope),
                e(f.fit.intercept),
                e(f.fit.r_squared),
                f.fit.undefined.to_string(),
            ]
        })
        .collect();
    csv_text(&["schedule", "quantity", "points", "slope", "intercept", "r_squared", "undefined"], body)
}

pub fn spectrum_csv(spectra: &[SpectrumResult]) -> String {
    let mut body = vec![];
    for s in spectra {
        for (i, &x) in s.eigenvalues.iter().enumerate() {
            body.push(vec![e(s.summary.alpha), e(s.summary.epsilon), i.to_string(), e(x), e(0.0)]);
        }
    }
    csv_text(&["alpha", "epsilon", "index", "eigenvalue", "imaginary"], body)
}

pub fn bands_csv(spectra: &[SpectrumResult]) -> String {
    let body = spectra
        .iter()
        .map(|s| {
            let b = &s.summary;
            vec![
                e(b.alpha),
                e(b.epsilon),
                b.dim.to_string(),
                e(b.neg_min),
                e(b.neg_max),
                e(b.small_min),
                e(b.small_max),
                e(b.large_min),
                e(b.large_max),
                b.isolated.to_string(),
                e(b.min_abs),
            ]
        })
        .collect();
    csv_text(
        &["alpha", "epsilon", "dim", "neg_min", "neg_max", "small_min", "small_max", "large_min", "large_max", "isolated", "min_abs"],
        body,
    )
}

pub fn residuals_csv(traces: &[ResidualTrace]) -> String {
    let mut body = vec![];
    for t in traces {
        for (i, r) in t.history.iter().enumerate() {
            body.push(vec![t.label.clone(), (i + 1).to_string(), e(*r)]);
        }
    }
    csv_text(&["run", "iteration", "relative_residual"], body)
}

pub fn verify_csv(checks: &[Check]) -> String {
    let body = checks
        .iter()
        .map(|c| vec![c.name.clone(), e(c.parameter), e(c.value), e(c.reference), c.passed.to_string()])
        .collect();
    csv_text(&["check", "parameter", "value", "reference", "passed"], body)
}

const PLOT_SCRIPT: &str = r#"# Plots the CSV files of this directory; needs pandas and matplotlib.
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

here = os.path.dirname(os.path.abspath(__file__))
normalize = "--normalize" in sys.argv


def load(name):
    p = os.path.join(here, name)
    if not os.path.exists(p):
        return None
    d = pd.read_csv(p)
    return d if len(d) else None


rates = load("rates.csv")
if rates is not None:
    fig, ax = plt.subplots()
    for name, g in rates.groupby("schedule"):
        g = g.sort_values("delta")
        err = g["u_err_sharp"].fillna(g["u_err_band"]) if "u_err_sharp" in g else g["u_err_band"]
        if normalize:
            err = err / err.iloc[-1]
        ax.loglog(g["delta"], err, "o-", label=name)
    d = rates["delta"].sort_values().unique()
    for p, style in [(0.5, "k--"), (2.0 / 3.0, "k:")]:
        ax.loglog(d, (d / d[-1]) ** p * ax.get_ylim()[1] / 2, style, label=f"O(delta^{p:.2f})")
    ax.set_xlabel("delta")
    ax.set_ylabel("control error")
    ax.legend()
    fig.savefig(os.path.join(here, "rates.png"), dpi=150)

spec = load("spectrum.csv")
if spec is not None:
    fig, ax = plt.subplots()
    for a, g in spec.groupby("alpha"):
        ax.plot(g["eigenvalue"], [a] * len(g) if a > 0 else [0] * len(g), "x", label=f"alpha={a:g}")
    ax.set_xscale("symlog", linthresh=1e-6)
    ax.set_xlabel("eigenvalue")
    ax.legend()
    fig.savefig(os.path.join(here, "spectrum.png"), dpi=150)
"#;

/// Writes every output file of a run into `dir`. `config_text` is echoed
/// verbatim.
pub fn emit_outputs(results: &StudyResults, dir: &Path, config_text: &str) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(dir, "table.csv", &table_csv(&results.table))?;
    write_file(dir, "rates.csv", &rates_csv(&results.rates))?;
    write_file(dir, "fits.csv", &fits_csv(&results.fits))?;
    write_file(dir, "spectrum.csv", &spectrum_csv(&results.spectra))?;
    write_file(dir, "bands.csv", &bands_csv(&results.spectra))?;
    write_file(dir, "residuals.csv", &residuals_csv(&results.residuals))?;
    write_file(dir, "verify.csv", &verify_csv(&results.checks))?;
    write_file(dir, "config.echo", config_text)?;
    write_file(dir, "plot.py", PLOT_SCRIPT)?;
    Ok(())
}

/// Human-readable summary printed by the command line tool.
pub fn summary_text(results: &StudyResults) -> String {
    let mut s = String::new();
    if !results.table.is_empty() {
        s.push_str(&table_csv(&results.table));
    }
    let mut by_schedule: BTreeMap<&str, Vec<&FitRow>> = BTreeMap::new();
    for f in &results.fits {
        by_schedule.entry(&f.schedule).or_default().push(f);
    }
    for (k, fits) in by_schedule {
        for f in fits {
            writeln!(s, "{k:<28} {:<18} slope {:>8.4} r2 {:.4}", f.quantity, f.fit.slope, f.fit.r_squared).unwrap();
        }
    }
    for sp in &results.spectra {
        let b = &sp.summary;
        writeln!(
            s,
            "alpha {:e}: negative [{:.3e}, {:.3e}], small [{:.3e}, {:.3e}], large [{:.3e}, {:.3e}], isolated {}, min |lambda| {:.3e}",
            b.alpha, b.neg_min, b.neg_max, b.small_min, b.small_max, b.large_min, b.large_max, b.isolated, b.min_abs
        )
        .unwrap();
    }
    for c in &results.checks {
        writeln!(s, "{:<22} {:>12.5e} value {:>14.6e} ref {:>12.5e} {}", c.name, c.parameter, c.value, c.reference, if c.passed { "ok" } else { "FAIL" }).unwrap();
    }
    s
}
