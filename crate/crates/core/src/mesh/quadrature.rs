//! Symmetric triangle quadrature rules in barycentric coordinates.

use super::MeshError;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub degree: u32,
    pub subdivision_count: u32,
    /// Barycentric coordinates of the points.
    pub points: Vec<[f64; 3]>,
    /// Weights relative to the triangle area; they sum to one.
    pub weights: Vec<f64>,
}

fn base_rule(degree: u32) -> Result<(Vec<[f64; 3]>, Vec<f64>), MeshError> {
    let perm3 = |a: f64, b: f64, c: f64| {
        vec![[a, b, c], [c, a, b], [b, c, a]]
    };
    match degree {
        1 => Ok((vec![[1.0 / 3.0; 3]], vec![1.0])),
        2 => Ok((perm3(0.5, 0.5, 0.0), vec![1.0 / 3.0; 3])),
        3 => {
            let (a, b, c) = (0.659027622374092, 0.231933368553031, 0.109039009072877);
            let mut p = perm3(a, b, c);
            p.extend(perm3(a, c, b));
            Ok((p, vec![1.0 / 6.0; 6]))
        }
        4 => {
            let a1 = 0.445948490915965;
            let a2 = 0.091576213509771;
            let mut p = perm3(1.0 - 2.0 * a1, a1, a1);
            p.extend(perm3(1.0 - 2.0 * a2, a2, a2));
            let (w1, w2) = (0.223381589678011, 0.109951743655322);
            Ok((p, vec![w1, w1, w1, w2, w2, w2]))
        }
        d => Err(MeshError::UnsupportedDegree(d)),
    }
}

/// Rule of the given degree replicated over the `k * k` uniform
/// sub-triangles obtained by splitting every edge into `k` pieces.
pub fn quadrature(degree: u32, subdivision_count: u32) -> Result<QuadratureRule, MeshError> {
    if subdivision_count == 0 {
        return Err(MeshError::InvalidParameter("subdivision_count must be >= 1".into()));
    }
    let (bp, bw) = base_rule(degree)?;
    let k = subdivision_count as usize;
    let kf = k as f64;
    let mut points = Vec::with_capacity(bp.len() * k * k);
    let mut weights = Vec::with_capacity(bp.len() * k * k);
    let scale = 1.0 / (kf * kf);
    let mut push = |corners: [[f64; 2]; 3]| {
        for (b, w) in bp.iter().zip(&bw) {
            let x = b[0] * corners[0][0] + b[1] * corners[1][0] + b[2] * corners[2][0];
            let y = b[0] * corners[0][1] + b[1] * corners[1][1] + b[2] * corners[2][1];
            points.push([1.0 - x - y, x, y]);
            weights.push(w * scale);
        }
    };
    for j in 0..k {
        for i in 0..k - j {
            let (x0, y0) = (i as f64 / kf, j as f64 / kf);
            let d = 1.0 / kf;
            push([[x0, y0], [x0 + d, y0], [x0, y0 + d]]);
            if i + j + 1 < k {
                push([[x0 + d, y0], [x0 + d, y0 + d], [x0, y0 + d]]);
            }
        }
    }
    Ok(QuadratureRule { degree, subdivision_count, points, weights })
}

impl QuadratureRule {
    /// Integrates `f` over the triangle with the given corners.
    pub fn integrate<F: FnMut([f64; 2]) -> f64>(&self, corners: &[[f64; 2]; 3], mut f: F) -> f64 {
        let area = super::signed_area(corners).abs();
        let mut s = 0.0;
        for (b, w) in self.points.iter().zip(&self.weights) {
            s += w * f(bary_to_point(corners, b));
        }
        s * area
    }
}

#[inline]
pub fn bary_to_point(c: &[[f64; 2]; 3], b: &[f64; 3]) -> [f64; 2] {
    [
        b[0] * c[0][0] + b[1] * c[1][0] + b[2] * c[2][0],
        b[0] * c[0][1] + b[1] * c[1][1] + b[2] * c[2][1],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

    fn monomial(a: i32, b: i32) -> f64 {
        let f = |n: i32| (1..=n).map(|k| k as f64).product::<f64>();
        f(a) * f(b) / f(a + b + 2)
    }

    #[test]
    fn low_order_rules() {
        let r = quadrature(1, 1).unwrap();
        assert_eq!(r.points.len(), 1);
        assert_eq!(r.weights, vec![1.0]);
        let r = quadrature(2, 1).unwrap();
        assert_eq!(r.points.len(), 3);
        assert!(r.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-16));
    }

    #[test]
    fn degree_four_cubic_monomials() {
        let r = quadrature(4, 1).unwrap();
        let v = r.integrate(&REF, |p| p[0] * p[0] * p[1]);
        assert!((v - 1.0 / 60.0).abs() < 1e-15, "{v}");
        let v = r.integrate(&REF, |p| p[0].powi(3) * p[1]);
        assert!((v - 1.0 / 120.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn exactness_up_to_declared_degree() {
        for degree in 1..=4u32 {
            for k in [1u32, 2, 3] {
                let r = quadrature(degree, k).unwrap();
                let wsum: f64 = r.weights.iter().sum();
                assert!((wsum - 1.0).abs() < 1e-14);
                for a in 0..=degree as i32 {
                    for b in 0..=(degree as i32 - a) {
                        let v = r.integrate(&REF, |p| p[0].powi(a) * p[1].powi(b));
                        assert!((v - monomial(a, b)).abs() < 1e-14, "deg {degree} k {k} x^{a} y^{b}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_unsupported() {
        assert!(quadrature(5, 1).is_err());
        assert!(quadrature(2, 0).is_err());
    }
}
