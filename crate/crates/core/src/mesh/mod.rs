//! Conforming triangulations: band-refined background meshes and polar
//! annulus meshes.

mod annulus;
pub mod quadrature;
mod quadtree;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annulus::mesh_annulus;
pub use quadrature::{quadrature, QuadratureRule};
pub use quadtree::{build_background, build_background_with, refine_band, Pattern, Quadtree};

/// Minimum interior angle required after refinement, in degrees.
pub const MIN_ANGLE_DEG: f64 = 20.0;

/// Default cap on the number of vertices of a background mesh.
pub const DEFAULT_VERTEX_CAP: usize = 4_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh parameter: {0}")]
    InvalidParameter(String),
    #[error("vertex budget exceeded: {needed} > {cap}")]
    VertexBudget { needed: usize, cap: usize },
    #[error("triangle {triangle} has minimum angle {angle_deg:.3} deg below the quality floor")]
    QualityFloor { triangle: usize, angle_deg: f64 },
    #[error("mesh carries no refinement structure")]
    NotRefinable,
    #[error("unsupported quadrature degree {0}")]
    UnsupportedDegree(u32),
    #[error("mesh parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    Inner,
    Outer,
    Box,
}

impl BoundaryTag {
    fn as_str(self) -> &'static str {
        match self {
            BoundaryTag::Inner => "inner",
            BoundaryTag::Outer => "outer",
            BoundaryTag::Box => "box",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "inner" => Some(BoundaryTag::Inner),
            "outer" => Some(BoundaryTag::Outer),
            "box" => Some(BoundaryTag::Box),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 2]>,
    /// Counterclockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<([usize; 2], BoundaryTag)>,
    pub refinement_level: Vec<u32>,
    /// Quadtree the mesh was generated from, if any.
    pub quadtree: Option<Quadtree>,
}

pub fn signed_area(c: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((c[1][0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (c[1][1] - c[0][1]))
}

/// Smallest interior angle of a triangle, in degrees.
pub fn min_angle_deg(c: &[[f64; 2]; 3]) -> f64 {
    let mut m = f64::INFINITY;
    for k in 0..3 {
        let a = c[k];
        let b = c[(k + 1) % 3];
        let d = c[(k + 2) % 3];
        let u = [b[0] - a[0], b[1] - a[1]];
        let v = [d[0] - a[0], d[1] - a[1]];
        let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
        m = m.min(cos.clamp(-1.0, 1.0).acos().to_degrees());
    }
    m
}

/// Longest edge of a triangle.
pub fn diameter(c: &[[f64; 2]; 3]) -> f64 {
    (0..3)
        .map(|k| {
            let a = c[k];
            let b = c[(k + 1) % 3];
            (b[0] - a[0]).hypot(b[1] - a[1])
        })
        .fold(0.0, f64::max)
}

impl TriMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn corners(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Sum of signed triangle areas, with compensated summation.
    pub fn total_area(&self) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for t in 0..self.n_triangles() {
            let a = signed_area(&self.corners(t));
            let u = s + a;
            c += if s.abs() >= a.abs() { (s - u) + a } else { (a - u) + s };
            s = u;
        }
        s + c
    }

    pub fn min_angle_deg(&self) -> f64 {
        (0..self.n_triangles())
            .map(|t| min_angle_deg(&self.corners(t)))
            .fold(f64::INFINITY, f64::min)
    }

    /// First triangle violating the quality floor.
    pub fn check_quality(&self, floor_deg: f64) -> Result<(), MeshError> {
        for t in 0..self.n_triangles() {
            let a = min_angle_deg(&self.corners(t));
            if a < floor_deg - 1e-9 {
                return Err(MeshError::QualityFloor { triangle: t, angle_deg: a });
            }
        }
        Ok(())
    }

    /// Number of triangles incident to every undirected edge.
    pub fn edge_incidence(&self) -> HashMap<[usize; 2], usize> {
        let mut map = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *map.entry([a.min(b), a.max(b)]).or_insert(0) += 1;
            }
        }
        map
    }

    /// Edges with a single incident triangle, sorted.
    pub fn free_edges(&self) -> Vec<[usize; 2]> {
        let mut e: Vec<_> = self
            .edge_incidence()
            .into_iter()
            .filter(|(_, c)| *c == 1)
            .map(|(e, _)| e)
            .collect();
        e.sort_unstable();
        e
    }

    /// Conformity audit: positive areas, at most two triangles per edge,
    /// and every single-incidence edge listed as a tagged boundary edge.
    pub fn is_conforming(&self) -> bool {
        if (0..self.n_triangles()).any(|t| signed_area(&self.corners(t)) <= 0.0) {
            return false;
        }
        let inc = self.edge_incidence();
        if inc.values().any(|&c| c > 2) {
            return false;
        }
        let mut tagged: Vec<[usize; 2]> = self
            .boundary_edges
            .iter()
            .map(|(e, _)| [e[0].min(e[1]), e[0].max(e[1])])
            .collect();
        tagged.sort_unstable();
        tagged == self.free_edges()
    }

    /// Vertices lying on edges with the given tag, sorted.
    pub fn boundary_vertices(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .boundary_edges
            .iter()
            .filter(|(_, t)| *t == tag)
            .flat_map(|(e, _)| e.iter().copied())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Sum of the lengths of the boundary edges with the given tag.
    pub fn boundary_length(&self, tag: BoundaryTag) -> f64 {
        self.boundary_edges
            .iter()
            .filter(|(_, t)| *t == tag)
            .map(|(e, _)| {
                let (a, b) = (self.vertices[e[0]], self.vertices[e[1]]);
                (b[0] - a[0]).hypot(b[1] - a[1])
            })
            .sum()
    }

    /// Plain-text dump: `vertices N triangles M`, coordinates, triangles
    /// with their refinement level, then tagged boundary edges.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "vertices {} triangles {}", self.n_vertices(), self.n_triangles()).unwrap();
        for v in &self.vertices {
            writeln!(s, "{:?} {:?}", v[0], v[1]).unwrap();
        }
        for (t, l) in self.triangles.iter().zip(&self.refinement_level) {
            writeln!(s, "{} {} {} {}", t[0], t[1], t[2], l).unwrap();
        }
        writeln!(s, "boundary_edges {}", self.boundary_edges.len()).unwrap();
        for (e, tag) in &self.boundary_edges {
            writeln!(s, "{} {} {}", e[0], e[1], tag.as_str()).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<TriMesh, MeshError> {
        let mut lines = text.lines().enumerate();
        let perr = |line: usize, msg: &str| MeshError::Parse { line: line + 1, msg: msg.to_string() };
        let mut next = |what: &str| lines.next().ok_or_else(|| perr(0, what));
        let (ln, header) = next("missing header")?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "vertices" || h[2] != "triangles" {
            return Err(perr(ln, "bad header"));
        }
        let nv: usize = h[1].parse().map_err(|_| perr(ln, "bad vertex count"))?;
        let nt: usize = h[3].parse().map_err(|_| perr(ln, "bad triangle count"))?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = next("missing vertex")?;
            let f: Vec<f64> = l
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| perr(ln, "bad coordinate"))?;
            if f.len() != 2 {
                return Err(perr(ln, "expected two coordinates"));
            }
            vertices.push([f[0], f[1]]);
        }
        let mut triangles = Vec::with_capacity(nt);
        let mut refinement_level = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = next("missing triangle")?;
            let f: Vec<usize> = l
                .split_whitespace()
                .map(|x| x.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| perr(ln, "bad triangle"))?;
            if f.len() != 4 || f[..3].iter().any(|&i| i >= nv) {
                return Err(perr(ln, "bad triangle"));
            }
            triangles.push([f[0], f[1], f[2]]);
            refinement_level.push(f[3] as u32);
        }
        let (ln, l) = next("missing boundary header")?;
        let nb: usize = l
            .strip_prefix("boundary_edges ")
            .and_then(|x| x.trim().parse().ok())
            .ok_or_else(|| perr(ln, "bad boundary header"))?;
        let mut boundary_edges = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (ln, l) = next("missing boundary edge")?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(ln, "bad boundary edge"));
            }
            let a: usize = f[0].parse().map_err(|_| perr(ln, "bad index"))?;
            let b: usize = f[1].parse().map_err(|_| perr(ln, "bad index"))?;
            let tag = BoundaryTag::parse(f[2]).ok_or_else(|| perr(ln, "bad tag"))?;
            boundary_edges.push(([a, b], tag));
        }
        Ok(TriMesh { vertices, triangles, boundary_edges, refinement_level, quadtree: None })
    }

    /// Same vertices, triangles, tags and levels, bit for bit.
    pub fn same_topology_and_coordinates(&self, other: &TriMesh) -> bool {
        self.vertices.len() == other.vertices.len()
            && self
                .vertices
                .iter()
                .zip(&other.vertices)
                .all(|(a, b)| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits())
            && self.triangles == other.triangles
            && self.boundary_edges == other.boundary_edges
            && self.refinement_level == other.refinement_level
    }
}
