use std::f64::consts::PI;

use super::{BoundaryTag, MeshError, TriMesh};
use crate::geometry::AnnulusGeometry;

/// Structured polar mesh of the annulus with uniform radial spacing.
///
/// Vertex `j * n_angular + i` sits at radius `r_j` and angle
/// `2 pi i / n_angular`; ring 0 is the inner circle.
pub fn mesh_annulus(
    geometry: &AnnulusGeometry,
    n_angular: usize,
    n_radial: usize,
) -> Result<TriMesh, MeshError> {
    if n_angular < 8 || n_radial < 2 {
        return Err(MeshError::InvalidParameter(format!(
            "annulus mesh needs n_angular >= 8 and n_radial >= 2, got {n_angular} x {n_radial}"
        )));
    }
    geometry.validate().map_err(|e| MeshError::InvalidParameter(e.to_string()))?;
    let (r0, r1) = (geometry.r_inner, geometry.r_outer);
    let mut vertices = Vec::with_capacity(n_angular * (n_radial + 1));
    for j in 0..=n_radial {
        let r = if j == n_radial { r1 } else { r0 + (r1 - r0) * j as f64 / n_radial as f64 };
        for i in 0..n_angular {
            let t = 2.0 * PI * i as f64 / n_angular as f64;
            vertices.push([r * t.cos(), r * t.sin()]);
        }
    }
    let id = |j: usize, i: usize| j * n_angular + i % n_angular;
    let mut triangles = Vec::with_capacity(2 * n_angular * n_radial);
    for j in 0..n_radial {
        for i in 0..n_angular {
            let (a, b, c, d) = (id(j, i), id(j, i + 1), id(j + 1, i + 1), id(j + 1, i));
            triangles.push([a, c, b]);
            triangles.push([a, d, c]);
        }
    }
    let mut boundary_edges = Vec::with_capacity(2 * n_angular);
    for i in 0..n_angular {
        boundary_edges.push(([id(0, i), id(0, i + 1)], BoundaryTag::Inner));
    }
    for i in 0..n_angular {
        boundary_edges.push(([id(n_radial, i), id(n_radial, i + 1)], BoundaryTag::Outer));
    }
    let refinement_level = vec![0; triangles.len()];
    Ok(TriMesh { vertices, triangles, boundary_edges, refinement_level, quadtree: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_tags() {
        let g = AnnulusGeometry::default();
        let m = mesh_annulus(&g, 8, 2).unwrap();
        assert_eq!((m.n_vertices(), m.n_triangles()), (24, 32));
        assert!(m.is_conforming());
        for v in m.boundary_vertices(BoundaryTag::Inner) {
            let r = m.vertices[v][0].hypot(m.vertices[v][1]);
            assert!((r - 0.3).abs() < 1e-15);
        }
        for v in m.boundary_vertices(BoundaryTag::Outer) {
            let r = m.vertices[v][0].hypot(m.vertices[v][1]);
            assert!((r - 1.0).abs() < 1e-15);
        }
        assert!(mesh_annulus(&g, 7, 2).is_err());
        assert!(mesh_annulus(&g, 8, 1).is_err());
    }

    #[test]
    fn area_converges_from_below() {
        let g = AnnulusGeometry::default();
        let exact = 0.91 * PI;
        let mut prev = 0.0;
        for n in [16, 32, 64] {
            let a = mesh_annulus(&g, n, 4).unwrap().total_area();
            assert!(a > prev && a < exact);
            // Inscribed polygons: relative defect 1 - sin(2 pi / n) n / (2 pi).
            let t = 2.0 * PI / n as f64;
            let oracle = exact * (t.sin() / t);
            assert!((a - oracle).abs() < 1e-12, "{a} vs {oracle}");
            prev = a;
        }
    }

    #[test]
    fn inner_perimeter_limit() {
        let g = AnnulusGeometry::default();
        let l = mesh_annulus(&g, 4096, 2).unwrap().boundary_length(BoundaryTag::Inner);
        assert!((l - 2.0 * PI * 0.3).abs() < 1e-6);
    }
}
