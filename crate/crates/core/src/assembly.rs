//! P1 finite element assembly of the diffuse and sharp bilinear forms.
//!
//! Diffuse integrands are only piecewise smooth: `|grad omega|` jumps on the
//! circles `|x| = R +- eps`. Elements crossing one of these circles are split
//! recursively until the pieces are small, and the smallest pieces are cut
//! along the chord through the exact crossing points. Every quadrature point
//! carries the radial layer it belongs to, so the band indicator is never
//! evaluated on the wrong side of a cut.

use thiserror::Error;

use crate::geometry::{norm, ConductivityTensor, Interface, PhaseField, Region, Weights};
use crate::mesh::{self, quadrature, BoundaryTag, QuadratureRule, TriMesh};
use crate::sparse::{Coo, Csr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("degenerate operator: {0}")]
    Degenerate(String),
    #[error("non-finite tensor value at ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("mesh has no boundary edges tagged {0:?}")]
    Untagged(BoundaryTag),
    #[error(transparent)]
    Mesh(#[from] mesh::MeshError),
}

/// Largest piece diameter at which a cut element is split along a chord.
pub fn leaf_size(epsilon: f64) -> f64 {
    (epsilon / 8.0).min(5e-4)
}

/// Where a quadrature point lies relative to the cut circles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Loc {
    pub region: Region,
    /// Inside the sharp domain `r_inner < |x| < r_outer`.
    pub inside: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct QPoint {
    pub x: [f64; 2],
    /// Quadrature weight including the area factor.
    pub w: f64,
    pub loc: Loc,
}

/// Generates quadrature points that respect the band structure.
#[derive(Debug, Clone)]
pub struct BandIntegrator {
    pub field: PhaseField,
    rule: QuadratureRule,
    base: QuadratureRule,
    leaf: f64,
    radii: Vec<f64>,
    locs: Vec<Loc>,
    /// Also emit points in the zero-weight layers.
    keep_outside: bool,
}

impl BandIntegrator {
    /// `cut_interfaces` adds the sharp interfaces to the cut circles, which
    /// is needed for integrands involving the indicator of the domain.
    pub fn new(field: &PhaseField, rule: &QuadratureRule, cut_interfaces: bool) -> Self {
        let g = field.geometry;
        let e = field.epsilon;
        let mut radii = vec![g.r_inner - e, g.r_inner + e, g.r_outer - e, g.r_outer + e];
        if cut_interfaces {
            radii.extend([g.r_inner, g.r_outer]);
        }
        radii.sort_by(f64::total_cmp);
        let n = radii.len();
        let locs = (0..=n)
            .map(|k| {
                let r = if k == 0 {
                    0.5 * radii[0]
                } else if k == n {
                    radii[n - 1] + 1.0
                } else {
                    0.5 * (radii[k - 1] + radii[k])
                };
                Loc { region: field.region_of_radius(r), inside: r > g.r_inner && r < g.r_outer }
            })
            .collect();
        let base = quadrature(rule.degree, 1).expect("degree already validated");
        BandIntegrator {
            field: *field,
            rule: rule.clone(),
            base,
            leaf: leaf_size(e),
            radii,
            locs,
            keep_outside: false,
        }
    }

    pub fn keep_outside(mut self, keep: bool) -> Self {
        self.keep_outside = keep;
        self
    }

    fn interval(&self, r: f64) -> usize {
        self.radii.partition_point(|&rho| rho < r)
    }

    fn emit(&self, c: &[[f64; 2]; 3], rule: &QuadratureRule, k: usize, out: &mut Vec<QPoint>) {
        let loc = self.locs[k];
        if !self.keep_outside && matches!(loc.region, Region::Core | Region::Exterior) {
            return;
        }
        let area = mesh::signed_area(c).abs();
        for (b, w) in rule.points.iter().zip(&rule.weights) {
            out.push(QPoint { x: quadrature::bary_to_point(c, b), w: w * area, loc });
        }
    }

    /// Appends the quadrature points of one triangle to `out`.
    pub fn points(&self, c: &[[f64; 2]; 3], out: &mut Vec<QPoint>) {
        self.recurse(c, 0, out);
    }

    fn recurse(&self, c: &[[f64; 2]; 3], depth: u32, out: &mut Vec<QPoint>) {
        let rmin = origin_distance(c);
        let rmax = norm(c[0]).max(norm(c[1])).max(norm(c[2]));
        let first = self.radii.partition_point(|&rho| rho <= rmin);
        let last = self.radii.partition_point(|&rho| rho < rmax);
        let rule = if depth == 0 { &self.rule } else { &self.base };
        if first >= last {
            let k = self.interval(norm(centroid(c)));
            self.emit(c, rule, k, out);
            return;
        }
        if mesh::diameter(c) > self.leaf || (last - first > 1 && depth < 48) {
            let m01 = mid(c[0], c[1]);
            let m12 = mid(c[1], c[2]);
            let m20 = mid(c[2], c[0]);
            for t in [[c[0], m01, m20], [m01, c[1], m12], [m20, m12, c[2]], [m01, m12, m20]] {
                self.recurse(&t, depth + 1, out);
            }
            return;
        }
        self.clip(c, first, out);
    }

    /// Cuts a small triangle along the chord of circle `radii[j]`.
    fn clip(&self, c: &[[f64; 2]; 3], j: usize, out: &mut Vec<QPoint>) {
        let rho = self.radii[j];
        let outer = c.map(|p| p[0] * p[0] + p[1] * p[1] > rho * rho);
        let n_out = outer.iter().filter(|&&o| o).count();
        if n_out == 0 || n_out == 3 {
            // The circle only grazes an edge; the sliver is below the leaf
            // resolution.
            let k = if n_out == 3 { j + 1 } else { j };
            self.emit(c, &self.base, k, out);
            return;
        }
        let lone_is_outer = n_out == 1;
        let a = (0..3).find(|&i| outer[i] == lone_is_outer).unwrap();
        let (b, d) = ((a + 1) % 3, (a + 2) % 3);
        let p = circle_crossing(c[a], c[b], rho);
        let q = circle_crossing(c[a], c[d], rho);
        let (k_lone, k_rest) = if lone_is_outer { (j + 1, j) } else { (j, j + 1) };
        self.emit(&[c[a], p, q], &self.base, k_lone, out);
        self.emit(&[p, c[b], c[d]], &self.base, k_rest, out);
        self.emit(&[p, c[d], q], &self.base, k_rest, out);
    }

    /// Pointwise weights at a quadrature point.
    #[inline]
    pub fn weights(&self, q: &QPoint) -> Weights {
        self.field.weights_in(norm(q.x), q.loc.region)
    }
}

fn mid(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

fn centroid(c: &[[f64; 2]; 3]) -> [f64; 2] {
    [(c[0][0] + c[1][0] + c[2][0]) / 3.0, (c[0][1] + c[1][1] + c[2][1]) / 3.0]
}

/// Point on segment `ab` with `|x| = rho`, assuming the endpoints lie on
/// opposite sides of the circle.
fn circle_crossing(a: [f64; 2], b: [f64; 2], rho: f64) -> [f64; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let qa = d[0] * d[0] + d[1] * d[1];
    let qb = 2.0 * (a[0] * d[0] + a[1] * d[1]);
    let qc = a[0] * a[0] + a[1] * a[1] - rho * rho;
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
    // Root in [0, 1]: the sign of qc tells which end is inside.
    let t = if qc < 0.0 { (-qb + disc) / (2.0 * qa) } else { (-qb - disc) / (2.0 * qa) };
    let t = t.clamp(0.0, 1.0);
    [a[0] + t * d[0], a[1] + t * d[1]]
}

fn origin_distance(c: &[[f64; 2]; 3]) -> f64 {
    let s = |p: [f64; 2], q: [f64; 2]| p[0] * q[1] - p[1] * q[0];
    let (s0, s1, s2) = (s(c[0], c[1]), s(c[1], c[2]), s(c[2], c[0]));
    if (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0) {
        return 0.0;
    }
    (0..3)
        .map(|k| segment_distance(c[k], c[(k + 1) % 3]))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let l2 = d[0] * d[0] + d[1] * d[1];
    let t = if l2 > 0.0 { (-(a[0] * d[0] + a[1] * d[1]) / l2).clamp(0.0, 1.0) } else { 0.0 };
    norm([a[0] + t * d[0], a[1] + t * d[1]])
}

/// Affine data of a P1 element: barycentric gradients and an inverse map.
#[derive(Debug, Clone, Copy)]
pub struct P1Element {
    pub corners: [[f64; 2]; 3],
    pub grads: [[f64; 2]; 3],
    pub area: f64,
}

impl P1Element {
    pub fn new(corners: [[f64; 2]; 3]) -> Self {
        let [a, b, c] = corners;
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let g1 = [(c[1] - a[1]) / det, -(c[0] - a[0]) / det];
        let g2 = [-(b[1] - a[1]) / det, (b[0] - a[0]) / det];
        let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
        P1Element { corners, grads: [g0, g1, g2], area: 0.5 * det.abs() }
    }

    /// Values of the three basis functions at `x`.
    #[inline]
    pub fn basis(&self, x: [f64; 2]) -> [f64; 3] {
        let a = self.corners[0];
        let dx = [x[0] - a[0], x[1] - a[1]];
        let l1 = self.grads[1][0] * dx[0] + self.grads[1][1] * dx[1];
        let l2 = self.grads[2][0] * dx[0] + self.grads[2][1] * dx[1];
        [1.0 - l1 - l2, l1, l2]
    }
}

/// Which diffuse forms to assemble.
#[derive(Debug, Clone, Copy, Default)]
pub struct FormSelection {
    pub stiffness: bool,
    pub mass: bool,
    pub band_h: bool,
    pub band_b: bool,
}

impl FormSelection {
    pub fn all() -> Self {
        FormSelection { stiffness: true, mass: true, band_h: true, band_b: true }
    }
}

#[derive(Debug, Clone)]
pub struct DiffuseForms {
    pub stiffness: Option<Csr>,
    pub mass: Option<Csr>,
    pub band_h: Option<Csr>,
    pub band_b: Option<Csr>,
}

/// Assembles the selected diffuse forms in one pass over the mesh.
pub fn assemble_diffuse(
    mesh: &TriMesh,
    tensor: &ConductivityTensor,
    field: &PhaseField,
    rule: &QuadratureRule,
    sel: FormSelection,
) -> Result<DiffuseForms, AssemblyError> {
    let n = mesh.n_vertices();
    let integ = BandIntegrator::new(field, rule, false);
    let g = field.geometry;
    let mut coo: [Coo; 4] = std::array::from_fn(|_| Coo::new(n, n));
    let mut pts = Vec::new();
    for t in 0..mesh.n_triangles() {
        pts.clear();
        let corners = mesh.corners(t);
        integ.points(&corners, &mut pts);
        if pts.is_empty() {
            continue;
        }
        let el = P1Element::new(corners);
        let mut loc = [[[0.0f64; 3]; 3]; 4];
        for q in &pts {
            let wts = integ.weights(q);
            let lam = el.basis(q.x);
            if sel.stiffness && wts.omega > 0.0 {
                let m = tensor.eval(q.x);
                if !m.iter().all(|v| v.is_finite()) {
                    return Err(AssemblyError::NonFinite(q.x[0], q.x[1]));
                }
                let s = q.w * wts.omega;
                for i in 0..3 {
                    let gi = el.grads[i];
                    let mg = [m[0] * gi[0] + m[1] * gi[1], m[1] * gi[0] + m[2] * gi[1]];
                    for j in 0..3 {
                        let gj = el.grads[j];
                        loc[0][i][j] += s * (mg[0] * gj[0] + mg[1] * gj[1]);
                    }
                }
            }
            let mut acc = |slot: usize, s: f64| {
                for i in 0..3 {
                    for j in 0..3 {
                        loc[slot][i][j] += s * lam[i] * lam[j];
                    }
                }
            };
            if sel.mass && wts.omega > 0.0 {
                acc(1, q.w * wts.omega);
            }
            if wts.grad_omega > 0.0 {
                let s = q.w * wts.grad_omega;
                if sel.band_h && g.boundary_weight(Interface::H, q.x) > 0.0 {
                    acc(2, s);
                }
                if sel.band_b && g.boundary_weight(Interface::B, q.x) > 0.0 {
                    acc(3, s);
                }
            }
        }
        let tri = mesh.triangles[t];
        for (slot, lm) in loc.iter().enumerate() {
            if lm.iter().all(|r| r.iter().all(|&v| v == 0.0)) {
                continue;
            }
            for i in 0..3 {
                for j in 0..3 {
                    coo[slot].push(tri[i], tri[j], lm[i][j]);
                }
            }
        }
    }
    let [k, m, bh, bb] = coo;
    let pick = |on: bool, c: Coo| if on { Some(c.to_csr()) } else { None };
    Ok(DiffuseForms {
        stiffness: pick(sel.stiffness, k),
        mass: pick(sel.mass, m),
        band_h: pick(sel.band_h, bh),
        band_b: pick(sel.band_b, bb),
    })
}

/// `K_ij = int omega grad phi_j . M grad phi_i`.
pub fn assemble_weighted_stiffness(
    mesh: &TriMesh,
    tensor: &ConductivityTensor,
    field: &PhaseField,
    rule: &QuadratureRule,
) -> Result<Csr, AssemblyError> {
    let sel = FormSelection { stiffness: true, ..Default::default() };
    Ok(assemble_diffuse(mesh, tensor, field, rule, sel)?.stiffness.unwrap())
}

/// `M_ij = int omega phi_i phi_j`.
pub fn assemble_bulk_mass(
    mesh: &TriMesh,
    field: &PhaseField,
    rule: &QuadratureRule,
) -> Result<Csr, AssemblyError> {
    let sel = FormSelection { mass: true, ..Default::default() };
    let t = ConductivityTensor::identity();
    Ok(assemble_diffuse(mesh, &t, field, rule, sel)?.mass.unwrap())
}

/// `B_ij = int phi_i phi_j |grad omega| gamma_which`.
pub fn assemble_band_mass(
    mesh: &TriMesh,
    field: &PhaseField,
    which: Interface,
    rule: &QuadratureRule,
) -> Result<Csr, AssemblyError> {
    let sel = FormSelection {
        band_h: which == Interface::H,
        band_b: which == Interface::B,
        ..Default::default()
    };
    let t = ConductivityTensor::identity();
    let f = assemble_diffuse(mesh, &t, field, rule, sel)?;
    let b = match which {
        Interface::H => f.band_h.unwrap(),
        Interface::B => f.band_b.unwrap(),
    };
    if b.nnz() == 0 || b.total() <= 0.0 {
        return Err(AssemblyError::Degenerate(format!("empty {which:?} band")));
    }
    Ok(b)
}

/// Stiffness and mass with a smooth pointwise weight and no band cutting.
pub fn assemble_plain(
    mesh: &TriMesh,
    tensor: &ConductivityTensor,
    weight: impl Fn([f64; 2]) -> f64,
    rule: &QuadratureRule,
) -> (Csr, Csr) {
    let n = mesh.n_vertices();
    let mut k = Coo::new(n, n);
    let mut m = Coo::new(n, n);
    for t in 0..mesh.n_triangles() {
        let corners = mesh.corners(t);
        let el = P1Element::new(corners);
        let mut kl = [[0.0; 3]; 3];
        let mut ml = [[0.0; 3]; 3];
        for (b, w) in rule.points.iter().zip(&rule.weights) {
            let x = quadrature::bary_to_point(&corners, b);
            let s = w * el.area * weight(x);
            let mt = tensor.eval(x);
            for i in 0..3 {
                let gi = el.grads[i];
                let mg = [mt[0] * gi[0] + mt[1] * gi[1], mt[1] * gi[0] + mt[2] * gi[1]];
                for j in 0..3 {
                    kl[i][j] += s * (mg[0] * el.grads[j][0] + mg[1] * el.grads[j][1]);
                    ml[i][j] += s * b[i] * b[j];
                }
            }
        }
        let tri = mesh.triangles[t];
        for i in 0..3 {
            for j in 0..3 {
                k.push(tri[i], tri[j], kl[i][j]);
                m.push(tri[i], tri[j], ml[i][j]);
            }
        }
    }
    (k.to_csr(), m.to_csr())
}

/// Which diffuse integral `diffuse_functional` evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionalKind {
    /// `int g omega`.
    Bulk,
    /// `int g |grad omega| gamma_H`.
    BandH,
    /// `int g |grad omega| gamma_B`.
    BandB,
}

pub fn diffuse_functional(
    mesh: &TriMesh,
    field: &PhaseField,
    g: impl Fn([f64; 2]) -> f64,
    kind: FunctionalKind,
    rule: &QuadratureRule,
) -> f64 {
    let integ = BandIntegrator::new(field, rule, false);
    let geo = field.geometry;
    let mut pts = Vec::new();
    let mut total = 0.0;
    for t in 0..mesh.n_triangles() {
        pts.clear();
        integ.points(&mesh.corners(t), &mut pts);
        let mut s = 0.0;
        for q in &pts {
            let w = integ.weights(q);
            let f = match kind {
                FunctionalKind::Bulk => w.omega,
                FunctionalKind::BandH => w.grad_omega * geo.boundary_weight(Interface::H, q.x),
                FunctionalKind::BandB => w.grad_omega * geo.boundary_weight(Interface::B, q.x),
            };
            if f != 0.0 {
                s += q.w * f * g(q.x);
            }
        }
        total += s;
    }
    total
}

/// `int g (omega - chi_D) gamma_which`, the defect of the diffuse volume
/// integral near one interface (or both when `which` is `None`).
pub fn interface_defect(
    mesh: &TriMesh,
    field: &PhaseField,
    g: impl Fn([f64; 2]) -> f64,
    which: Option<Interface>,
    rule: &QuadratureRule,
) -> f64 {
    let integ = BandIntegrator::new(field, rule, true);
    let geo = field.geometry;
    let mut pts = Vec::new();
    let mut total = 0.0;
    for t in 0..mesh.n_triangles() {
        pts.clear();
        integ.points(&mesh.corners(t), &mut pts);
        let mut s = 0.0;
        for q in &pts {
            if !q.loc.region.is_band() {
                continue;
            }
            if let Some(w) = which {
                if geo.boundary_weight(w, q.x) == 0.0 {
                    continue;
                }
            }
            let chi = if q.loc.inside { 1.0 } else { 0.0 };
            s += q.w * (integ.weights(q).omega - chi) * g(q.x);
        }
        total += s;
    }
    total
}

/// All diffuse operators of one (mesh, eps) configuration.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    pub epsilon: f64,
    pub k_omega: Csr,
    pub m_omega: Csr,
    pub b_h: Csr,
    pub b_b: Csr,
    /// `m_i = <phi_i, 1>` in the interface product on the H band.
    pub mean_vec: Vec<f64>,
    pub active_u: Vec<usize>,
    pub active_v: Vec<usize>,
}

pub fn assemble_operators(
    mesh: &TriMesh,
    tensor: &ConductivityTensor,
    field: &PhaseField,
    rule: &QuadratureRule,
) -> Result<OperatorSet, AssemblyError> {
    let f = assemble_diffuse(mesh, tensor, field, rule, FormSelection::all())?;
    let b_h = f.band_h.unwrap();
    let b_b = f.band_b.unwrap();
    for (b, w) in [(&b_h, Interface::H), (&b_b, Interface::B)] {
        if b.total() <= 0.0 {
            return Err(AssemblyError::Degenerate(format!("empty {w:?} band")));
        }
    }
    let mean_vec = b_h.row_sums();
    let mut ops = OperatorSet {
        epsilon: field.epsilon,
        k_omega: f.stiffness.unwrap(),
        m_omega: f.mass.unwrap(),
        b_h,
        b_b,
        mean_vec,
        active_u: vec![],
        active_v: vec![],
    };
    let (u, v) = active_sets(&ops)?;
    ops.active_u = u;
    ops.active_v = v;
    Ok(ops)
}

fn above_threshold(d: &[f64]) -> Vec<usize> {
    let max = d.iter().fold(0.0f64, |m, &x| m.max(x));
    let tol = 1e-14 * max;
    (0..d.len()).filter(|&i| d[i] > tol).collect()
}

/// Control and state degrees of freedom with non-negligible support.
pub fn active_sets(ops: &OperatorSet) -> Result<(Vec<usize>, Vec<usize>), AssemblyError> {
    let u = above_threshold(&ops.b_h.diagonal());
    let dk = ops.k_omega.diagonal();
    let dm = ops.m_omega.diagonal();
    let dv: Vec<f64> = dk.iter().zip(&dm).map(|(a, b)| a + b).collect();
    let v = above_threshold(&dv);
    if u.is_empty() || v.is_empty() {
        return Err(AssemblyError::Degenerate("empty active set".into()));
    }
    Ok((u, v))
}

/// Operators of the sharp annulus discretization.
#[derive(Debug, Clone)]
pub struct SharpOperatorSet {
    pub k_d: Csr,
    pub m_d: Csr,
    pub t_inner: Csr,
    pub t_outer: Csr,
    pub mean_vec_sharp: Vec<f64>,
    pub inner_nodes: Vec<usize>,
    pub outer_nodes: Vec<usize>,
}

fn edge_mass(mesh: &TriMesh, tag: BoundaryTag) -> Result<Csr, AssemblyError> {
    let n = mesh.n_vertices();
    let mut c = Coo::new(n, n);
    let mut any = false;
    for (e, t) in &mesh.boundary_edges {
        if *t != tag {
            continue;
        }
        any = true;
        let (a, b) = (mesh.vertices[e[0]], mesh.vertices[e[1]]);
        let l = (b[0] - a[0]).hypot(b[1] - a[1]);
        c.push(e[0], e[0], l / 3.0);
        c.push(e[1], e[1], l / 3.0);
        c.push(e[0], e[1], l / 6.0);
        c.push(e[1], e[0], l / 6.0);
    }
    if !any {
        return Err(AssemblyError::Untagged(tag));
    }
    Ok(c.to_csr())
}

pub fn assemble_sharp(mesh: &TriMesh, tensor: &ConductivityTensor) -> Result<SharpOperatorSet, AssemblyError> {
    let rule = quadrature(2, 1)?;
    let (k_d, m_d) = assemble_plain(mesh, tensor, |_| 1.0, &rule);
    let t_inner = edge_mass(mesh, BoundaryTag::Inner)?;
    let t_outer = edge_mass(mesh, BoundaryTag::Outer)?;
    let mean_vec_sharp = t_inner.row_sums();
    Ok(SharpOperatorSet {
        k_d,
        m_d,
        t_inner,
        t_outer,
        mean_vec_sharp,
        inner_nodes: mesh.boundary_vertices(BoundaryTag::Inner),
        outer_nodes: mesh.boundary_vertices(BoundaryTag::Outer),
    })
}

/// Nodal values of `f`.
pub fn interpolate(mesh: &TriMesh, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    mesh.vertices.iter().map(|&x| f(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AnnulusGeometry;
    use crate::mesh::{build_background, mesh_annulus, refine_band};
    use std::f64::consts::PI;

    fn band_mesh(eps: f64, h0: f64, levels: u32) -> (TriMesh, PhaseField) {
        let f = PhaseField::new(AnnulusGeometry::default(), eps).unwrap();
        let m = refine_band(&build_background(h0).unwrap(), &f, levels).unwrap();
        (m, f)
    }

    #[test]
    fn textbook_element_stiffness() {
        let mesh = TriMesh {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2]],
            boundary_edges: vec![],
            refinement_level: vec![0],
            quadtree: None,
        };
        let (k, m) = assemble_plain(&mesh, &ConductivityTensor::identity(), |_| 1.0, &quadrature(2, 1).unwrap());
        let want = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k.get(i, j) - want[i][j]).abs() < 1e-15);
            }
        }
        assert!((m.total() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn band_masses_measure_the_circles() {
        let (m, f) = band_mesh(0.125, 0.2, 2);
        let r = quadrature(2, 1).unwrap();
        let bh = assemble_band_mass(&m, &f, Interface::H, &r).unwrap();
        let bb = assemble_band_mass(&m, &f, Interface::B, &r).unwrap();
        assert!((bh.total() / (2.0 * PI * 0.3) - 1.0).abs() < 1e-5, "{}", bh.total());
        assert!((bb.total() / (2.0 * PI) - 1.0).abs() < 1e-5, "{}", bb.total());
        assert!(bh.asymmetry() < 1e-14 && bb.asymmetry() < 1e-14);
    }

    #[test]
    fn stiffness_kills_constants() {
        let (m, f) = band_mesh(0.125, 0.2, 1);
        let k = assemble_weighted_stiffness(&m, &ConductivityTensor::default(), &f, &quadrature(2, 2).unwrap()).unwrap();
        let kc = k.matvec(&vec![1.0; m.n_vertices()]);
        assert!(kc.iter().all(|v| v.abs() < 1e-12));
        assert!(k.asymmetry() < 1e-14);
    }

    #[test]
    fn bulk_mass_matches_radial_oracle() {
        // Total mass is int omega = 0.91 pi exactly for the linear profile.
        let (m, f) = band_mesh(0.0625, 0.2, 2);
        let mm = assemble_bulk_mass(&m, &f, &quadrature(4, 1).unwrap()).unwrap();
        assert!((mm.total() - 0.91 * PI).abs() < 1e-6, "{}", mm.total());
        let one = vec![1.0; m.n_vertices()];
        assert!((mm.quad_form(&one) - mm.total()).abs() < 1e-12);
    }

    #[test]
    fn interface_defects_are_exact() {
        let (m, f) = band_mesh(0.125, 0.2, 2);
        let r = quadrature(4, 1).unwrap();
        let e2 = 0.125f64 * 0.125;
        let dh = interface_defect(&m, &f, |_| 1.0, Some(Interface::H), &r);
        let db = interface_defect(&m, &f, |_| 1.0, Some(Interface::B), &r);
        assert!((dh + PI * e2 / 3.0).abs() < 1e-7, "{dh}");
        assert!((db - PI * e2 / 3.0).abs() < 1e-7, "{db}");
    }

    #[test]
    fn sharp_operators() {
        let g = AnnulusGeometry::default();
        let mesh = mesh_annulus(&g, 64, 16).unwrap();
        let s = assemble_sharp(&mesh, &ConductivityTensor::default()).unwrap();
        let kc = s.k_d.matvec(&vec![1.0; mesh.n_vertices()]);
        assert!(kc.iter().all(|v| v.abs() < 1e-12));
        let t = 2.0 * PI / 64.0;
        let perim = 64.0 * 2.0 * (t / 2.0).sin();
        assert!((s.t_outer.total() - perim).abs() < 1e-12);
        assert!((s.mean_vec_sharp.iter().sum::<f64>() - 0.3 * perim).abs() < 1e-12);
        assert_eq!(s.inner_nodes.len(), 64);
    }

    #[test]
    fn active_sets_respect_supports() {
        let (m, f) = band_mesh(0.125, 0.2, 1);
        let ops = assemble_operators(&m, &ConductivityTensor::default(), &f, &quadrature(2, 1).unwrap()).unwrap();
        for &i in &ops.active_u {
            let r = norm(m.vertices[i]);
            assert!(r < 0.65);
        }
        for &i in &ops.active_v {
            assert!(norm(m.vertices[i]) < 1.4);
        }
        let mv: f64 = ops.active_u.iter().map(|&i| ops.mean_vec[i]).sum();
        assert!((mv - ops.mean_vec.iter().sum::<f64>()).abs() < 1e-14);
    }
}
