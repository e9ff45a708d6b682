//! Background meshes of the box [-1.5, 1.5]^2 generated from a balanced
//! quadtree of squares.
//!
//! Every leaf square is triangulated either by its bottom-left to top-right
//! diagonal (`Split2`) or by both diagonals (`CrissCross`). Splitting a
//! `Split2` square into four is exactly red refinement of its two triangles.
//! Hanging midpoints left by finer neighbours are closed by fixed templates.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{BoundaryTag, MeshError, TriMesh, DEFAULT_VERTEX_CAP, MIN_ANGLE_DEG};
use crate::geometry::PhaseField;

pub const BOX_HALF_WIDTH: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Two triangles per square.
    #[default]
    Split2,
    /// Four triangles per square around the centre.
    CrissCross,
}

/// (level, i, j): square `i, j` of the grid refined `level` times.
pub type Cell = (u32, u64, u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Quadtree {
    pub n: usize,
    pub spacing: f64,
    pub pattern: Pattern,
    pub leaves: BTreeSet<Cell>,
    pub vertex_cap: usize,
}

const BOTTOM: u8 = 1;
const RIGHT: u8 = 2;
const TOP: u8 = 4;
const LEFT: u8 = 8;

impl Quadtree {
    pub fn uniform(h0: f64, pattern: Pattern, vertex_cap: usize) -> Result<Self, MeshError> {
        if !(h0 > 0.0 && h0.is_finite()) {
            return Err(MeshError::InvalidParameter(format!("h0 = {h0}")));
        }
        let width = 2.0 * BOX_HALF_WIDTH;
        let n = ((width / h0) - 1e-9).ceil().max(1.0) as usize;
        let needed = (n + 1) * (n + 1) + if pattern == Pattern::CrissCross { n * n } else { 0 };
        if needed > vertex_cap {
            return Err(MeshError::VertexBudget { needed, cap: vertex_cap });
        }
        let mut leaves = BTreeSet::new();
        for j in 0..n as u64 {
            for i in 0..n as u64 {
                leaves.insert((0, i, j));
            }
        }
        Ok(Quadtree { n, spacing: width / n as f64, pattern, leaves, vertex_cap })
    }

    pub fn max_level(&self) -> u32 {
        self.leaves.iter().map(|c| c.0).max().unwrap_or(0)
    }

    fn in_domain(&self, l: u32, i: i64, j: i64) -> bool {
        let m = (self.n as i64) << l;
        i >= 0 && j >= 0 && i < m && j < m
    }

    /// Whether a leaf at level `<= l` covers square `(l, i, j)`.
    fn covered(&self, l: u32, i: u64, j: u64) -> bool {
        (0..=l).any(|k| self.leaves.contains(&(k, i >> (l - k), j >> (l - k))))
    }

    /// Square exists in the domain and has been subdivided further.
    fn is_split(&self, l: u32, i: i64, j: i64) -> bool {
        self.in_domain(l, i, j) && !self.covered(l, i as u64, j as u64)
    }

    pub fn split(&mut self, c: Cell) {
        if self.leaves.remove(&c) {
            let (l, i, j) = c;
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                self.leaves.insert((l + 1, 2 * i + di, 2 * j + dj));
            }
        }
    }

    /// Bounds `[x0, y0, x1, y1]` of a cell.
    pub fn cell_bounds(&self, c: Cell) -> [f64; 4] {
        let h = self.spacing / (1u64 << c.0) as f64;
        let x0 = -BOX_HALF_WIDTH + c.1 as f64 * h;
        let y0 = -BOX_HALF_WIDTH + c.2 as f64 * h;
        [x0, y0, x0 + h, y0 + h]
    }

    /// Sides of a leaf that carry a hanging midpoint.
    fn hanging(&self, c: Cell) -> u8 {
        let (l, i, j) = (c.0, c.1 as i64, c.2 as i64);
        let mut m = 0;
        for (bit, di, dj) in [(BOTTOM, 0, -1), (RIGHT, 1, 0), (TOP, 0, 1), (LEFT, -1, 0)] {
            if self.is_split(l, i + di, j + dj) {
                m |= bit;
            }
        }
        m
    }

    /// Whether a neighbour across some side is refined two or more levels
    /// deeper than the leaf.
    fn violates_balance(&self, c: Cell) -> bool {
        let (l, i, j) = (c.0, c.1 as i64, c.2 as i64);
        let sides: [(i64, i64, [(i64, i64); 2]); 4] = [
            (0, -1, [(0, 1), (1, 1)]),
            (1, 0, [(0, 0), (0, 1)]),
            (0, 1, [(0, 0), (1, 0)]),
            (-1, 0, [(1, 0), (1, 1)]),
        ];
        for (di, dj, kids) in sides {
            let (ni, nj) = (i + di, j + dj);
            if !self.is_split(l, ni, nj) {
                continue;
            }
            for (ki, kj) in kids {
                if self.is_split(l + 1, 2 * ni + ki, 2 * nj + kj) {
                    return true;
                }
            }
        }
        false
    }

    /// Enforces the 2:1 rule across edges, plus the `Split2` restriction of
    /// at most two adjacent or two opposite hanging sides.
    pub fn balance(&mut self) {
        loop {
            let bad: Vec<Cell> = self
                .leaves
                .iter()
                .copied()
                .filter(|&c| {
                    self.violates_balance(c)
                        || (self.pattern == Pattern::Split2 && self.hanging(c).count_ones() >= 3)
                })
                .collect();
            if bad.is_empty() {
                break;
            }
            for c in bad {
                self.split(c);
            }
        }
    }

    /// Splits every leaf satisfying `pred` once per level, then rebalances.
    pub fn refine_where<F: Fn([f64; 4]) -> bool>(&mut self, pred: F, levels: u32) {
        for _ in 0..levels {
            let marked: Vec<Cell> =
                self.leaves.iter().copied().filter(|&c| pred(self.cell_bounds(c))).collect();
            for c in marked {
                self.split(c);
            }
            self.balance();
        }
    }

    fn vertex_estimate(&self) -> usize {
        let per = if self.pattern == Pattern::CrissCross { 2 } else { 1 };
        self.leaves.len() * per + (self.n + 1) * 2 + 1
    }

    pub fn triangulate(&self) -> Result<TriMesh, MeshError> {
        let needed = self.vertex_estimate();
        if needed > self.vertex_cap {
            return Err(MeshError::VertexBudget { needed, cap: self.vertex_cap });
        }
        let top = self.max_level() + 1;
        // Leaves ordered bottom to top, left to right.
        let mut cells: Vec<(u64, u64, Cell)> = self
            .leaves
            .iter()
            .map(|&c| {
                let s = 1u64 << (top - c.0);
                (c.2 * s, c.1 * s, c)
            })
            .collect();
        cells.sort_unstable();

        let mut local: Vec<([[u64; 2]; 3], u32)> = Vec::with_capacity(2 * cells.len());
        for &(y0, x0, c) in &cells {
            let half = 1u64 << (top - c.0 - 1);
            let h = self.hanging(c);
            let tris = match self.pattern {
                Pattern::Split2 => split2_template(h),
                Pattern::CrissCross => crisscross_template(h),
            };
            for t in tris {
                let g = t.map(|p| [x0 + p[0] as u64 * half, y0 + p[1] as u64 * half]);
                local.push((g, c.0));
            }
        }

        let keys: BTreeSet<(u64, u64)> =
            local.iter().flat_map(|(t, _)| t.iter().map(|p| (p[1], p[0]))).collect();
        let unit = self.spacing / (1u64 << top) as f64;
        let mut index = HashMap::with_capacity(keys.len());
        let mut vertices = Vec::with_capacity(keys.len());
        for (k, &(y, x)) in keys.iter().enumerate() {
            index.insert((x, y), k);
            vertices.push([-BOX_HALF_WIDTH + x as f64 * unit, -BOX_HALF_WIDTH + y as f64 * unit]);
        }
        let mut triangles = Vec::with_capacity(local.len());
        let mut refinement_level = Vec::with_capacity(local.len());
        for (t, l) in local {
            let mut tri = t.map(|p| index[&(p[0], p[1])]);
            let c = tri.map(|v| vertices[v]);
            if super::signed_area(&c) < 0.0 {
                tri.swap(1, 2);
            }
            triangles.push(tri);
            refinement_level.push(l);
        }
        let mut mesh = TriMesh {
            vertices,
            triangles,
            boundary_edges: Vec::new(),
            refinement_level,
            quadtree: Some(self.clone()),
        };
        mesh.boundary_edges = mesh.free_edges().into_iter().map(|e| (e, BoundaryTag::Box)).collect();
        Ok(mesh)
    }
}

type Local = [[u8; 2]; 3];

const BL: [u8; 2] = [0, 0];
const BR: [u8; 2] = [2, 0];
const TR: [u8; 2] = [2, 2];
const TL: [u8; 2] = [0, 2];
const MB: [u8; 2] = [1, 0];
const MR: [u8; 2] = [2, 1];
const MT: [u8; 2] = [1, 2];
const ML: [u8; 2] = [0, 1];

/// Symmetries of the square that keep the bottom-left to top-right diagonal.
fn apply(sym: u8, p: [u8; 2]) -> [u8; 2] {
    match sym {
        0 => p,
        1 => [2 - p[0], 2 - p[1]],
        2 => [p[1], p[0]],
        _ => [2 - p[1], 2 - p[0]],
    }
}

fn apply_sides(sym: u8, m: u8) -> u8 {
    let map: [u8; 4] = match sym {
        0 => [BOTTOM, RIGHT, TOP, LEFT],
        1 => [TOP, LEFT, BOTTOM, RIGHT],
        2 => [LEFT, TOP, RIGHT, BOTTOM],
        _ => [RIGHT, BOTTOM, LEFT, TOP],
    };
    [BOTTOM, RIGHT, TOP, LEFT]
        .iter()
        .zip(map)
        .filter(|(b, _)| m & **b != 0)
        .fold(0, |acc, (_, t)| acc | t)
}

fn split2_template(h: u8) -> Vec<Local> {
    if h == 0 {
        return vec![[BL, BR, TR], [BL, TR, TL]];
    }
    let canon: [(u8, Vec<Local>); 4] = [
        (BOTTOM, vec![[BL, MB, TL], [MB, BR, TR], [MB, TR, TL]]),
        (BOTTOM | RIGHT, vec![[BL, MB, TL], [MB, BR, MR], [MB, MR, TL], [MR, TR, TL]]),
        (LEFT | BOTTOM, vec![[BL, MB, ML], [MB, BR, TR], [MB, TR, ML], [ML, TR, TL]]),
        (BOTTOM | TOP, vec![[BL, MB, MT], [BL, MT, TL], [MB, BR, TR], [MB, TR, MT]]),
    ];
    for (mask, tris) in &canon {
        for sym in 0..4 {
            if apply_sides(sym, *mask) == h {
                return tris.iter().map(|t| t.map(|p| apply(sym, p))).collect();
            }
        }
    }
    unreachable!("balanced Split2 leaf with hanging mask {h:#06b}")
}

fn crisscross_template(h: u8) -> Vec<Local> {
    let c = [1, 1];
    let sides = [(BOTTOM, BL, MB, BR), (RIGHT, BR, MR, TR), (TOP, TR, MT, TL), (LEFT, TL, ML, BL)];
    let mut out = Vec::with_capacity(8);
    for (bit, a, m, b) in sides {
        if h & bit != 0 {
            out.push([a, m, c]);
            out.push([m, b, c]);
        } else {
            out.push([a, b, c]);
        }
    }
    out
}

/// Uniform background mesh with the default `Split2` pattern.
pub fn build_background(h0: f64) -> Result<TriMesh, MeshError> {
    build_background_with(h0, Pattern::Split2, DEFAULT_VERTEX_CAP)
}

pub fn build_background_with(h0: f64, pattern: Pattern, vertex_cap: usize) -> Result<TriMesh, MeshError> {
    Quadtree::uniform(h0, pattern, vertex_cap)?.triangulate()
}

/// Whether the axis-aligned box meets the annulus `r0 < |x| < r1`.
fn box_meets_annulus(b: [f64; 4], r0: f64, r1: f64) -> bool {
    let cx = 0f64.clamp(b[0], b[2]);
    let cy = 0f64.clamp(b[1], b[3]);
    let dmin = cx.hypot(cy);
    let fx = b[0].abs().max(b[2].abs());
    let fy = b[1].abs().max(b[3].abs());
    let dmax = fx.hypot(fy);
    dmin < r1 && dmax > r0
}

/// Refines every square meeting `{|d| < 2 eps}` `levels` times.
pub fn refine_band(mesh: &TriMesh, field: &PhaseField, levels: u32) -> Result<TriMesh, MeshError> {
    if levels == 0 {
        return Ok(mesh.clone());
    }
    let mut qt = mesh.quadtree.clone().ok_or(MeshError::NotRefinable)?;
    let g = field.geometry;
    let m = 2.0 * field.epsilon;
    qt.refine_where(
        |b| {
            box_meets_annulus(b, g.r_inner - m, g.r_inner + m)
                || box_meets_annulus(b, g.r_outer - m, g.r_outer + m)
        },
        levels,
    );
    let out = qt.triangulate()?;
    out.check_quality(MIN_ANGLE_DEG)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AnnulusGeometry;

    #[test]
    fn background_counts() {
        let m = build_background(1.5).unwrap();
        assert_eq!((m.n_vertices(), m.n_triangles()), (9, 8));
        let m = build_background_with(3.0, Pattern::CrissCross, 100).unwrap();
        assert_eq!(m.n_triangles(), 4);
        assert!((m.total_area() - 9.0).abs() < 1e-12);
        let m = build_background(0.1).unwrap();
        assert_eq!((m.n_vertices(), m.n_triangles()), (31 * 31, 2 * 900));
        assert!((m.total_area() - 9.0).abs() < 1e-12);
        assert!(m.is_conforming());
    }

    #[test]
    fn vertex_budget() {
        assert!(matches!(
            build_background_with(0.01, Pattern::Split2, 1000),
            Err(MeshError::VertexBudget { .. })
        ));
    }

    #[test]
    fn every_hanging_pattern_has_a_template() {
        for h in 0u8..16 {
            let allowed = h.count_ones() <= 2;
            if allowed {
                let t = split2_template(h);
                let area2: i32 = t
                    .iter()
                    .map(|t| {
                        let (a, b, c) = (t[0], t[1], t[2]);
                        let s = (b[0] as i32 - a[0] as i32) * (c[1] as i32 - a[1] as i32)
                            - (c[0] as i32 - a[0] as i32) * (b[1] as i32 - a[1] as i32);
                        s.abs()
                    })
                    .sum();
                assert_eq!(area2, 8, "mask {h}");
            }
            assert_eq!(crisscross_template(h).len() as u32, 4 + h.count_ones());
        }
    }

    #[test]
    fn refined_meshes_conform_and_keep_quality() {
        for pattern in [Pattern::Split2, Pattern::CrissCross] {
            let base = build_background_with(0.1, pattern, DEFAULT_VERTEX_CAP).unwrap();
            let f = PhaseField::new(AnnulusGeometry::default(), 0.0625).unwrap();
            let m = refine_band(&base, &f, 3).unwrap();
            assert!(m.is_conforming());
            assert!((m.total_area() - 9.0).abs() < 1e-12, "{pattern:?} {} {}", m.total_area(), m.n_triangles());
            assert!(m.min_angle_deg() >= 20.0);
        }
    }

    #[test]
    fn zero_levels_is_identity() {
        let base = build_background(0.3).unwrap();
        let f = PhaseField::new(AnnulusGeometry::default(), 0.1).unwrap();
        let m = refine_band(&base, &f, 0).unwrap();
        assert!(m.same_topology_and_coordinates(&base));
    }
}
