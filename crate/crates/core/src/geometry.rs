//! Circle-in-circle geometry and its phase-field description.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest admissible interface width.
pub const MAX_EPSILON: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid radii: need 0 < r_inner ({r_inner}) < split_radius ({split}) < r_outer ({r_outer})")]
    InvalidRadii { r_inner: f64, split: f64, r_outer: f64 },
    #[error("epsilon {0} is not admissible (must satisfy 0 < eps <= {MAX_EPSILON} and keep the bands disjoint)")]
    InvalidEpsilon(f64),
    #[error("point ({0}, {1}) is not inside an interface band")]
    OutOfBand(f64, f64),
    #[error("invalid conductivity eigenvalues ({0}, {1})")]
    InvalidTensor(f64, f64),
}

/// The two interfaces of the annulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Interface {
    /// Heart surface, `|x| = r_inner`.
    H,
    /// Body surface, `|x| = r_outer`.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusGeometry {
    pub r_inner: f64,
    pub r_outer: f64,
    pub split_radius: f64,
}

impl Default for AnnulusGeometry {
    fn default() -> Self {
        AnnulusGeometry { r_inner: 0.3, r_outer: 1.0, split_radius: 0.65 }
    }
}

impl AnnulusGeometry {
    pub fn new(r_inner: f64, r_outer: f64, split_radius: f64) -> Result<Self, GeometryError> {
        let g = AnnulusGeometry { r_inner, r_outer, split_radius };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.r_inner > 0.0
            && self.r_inner < self.split_radius
            && self.split_radius < self.r_outer
            && self.r_outer.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidRadii {
                r_inner: self.r_inner,
                split: self.split_radius,
                r_outer: self.r_outer,
            })
        }
    }

    pub fn radius(&self, which: Interface) -> f64 {
        match which {
            Interface::H => self.r_inner,
            Interface::B => self.r_outer,
        }
    }

    /// Exact area of the annulus.
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * (self.r_outer * self.r_outer - self.r_inner * self.r_inner)
    }

    /// Bound on epsilon that keeps both bands away from the split radius.
    pub fn max_epsilon(&self) -> f64 {
        (self.split_radius - self.r_inner)
            .min(self.r_outer - self.split_radius)
            .min(self.r_inner)
    }

    pub fn signed_distance(&self, x: [f64; 2]) -> f64 {
        signed_distance_radial(self, norm(x))
    }

    pub fn boundary_weight(&self, which: Interface, x: [f64; 2]) -> f64 {
        let inner = norm(x) < self.split_radius;
        match (which, inner) {
            (Interface::H, true) | (Interface::B, false) => 1.0,
            _ => 0.0,
        }
    }

    /// Interface closest to `x` (by the split radius).
    pub fn nearest_interface(&self, x: [f64; 2]) -> Interface {
        if norm(x) < self.split_radius {
            Interface::H
        } else {
            Interface::B
        }
    }

    /// Outward unit normal of the annulus at a boundary point of `which`.
    pub fn outward_normal(&self, which: Interface, xbar: [f64; 2]) -> [f64; 2] {
        let r = norm(xbar);
        let s = match which {
            Interface::H => -1.0 / r,
            Interface::B => 1.0 / r,
        };
        [s * xbar[0], s * xbar[1]]
    }
}

/// Signed distance as a function of the radius alone.
pub fn signed_distance_radial(g: &AnnulusGeometry, r: f64) -> f64 {
    (g.r_inner - r).max(r - g.r_outer)
}

pub fn signed_distance(geometry: &AnnulusGeometry, point: [f64; 2]) -> f64 {
    geometry.signed_distance(point)
}

/// Piecewise linear sigmoid: identity on [-1, 1], sign outside.
pub fn sigmoid(t: f64) -> f64 {
    t.clamp(-1.0, 1.0)
}

#[inline]
pub fn norm(x: [f64; 2]) -> f64 {
    x[0].hypot(x[1])
}

/// Radial layers of the diffuse geometry, from the origin outward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    /// `|x| <= r_inner - eps`.
    Core,
    BandH,
    /// `r_inner + eps <= |x| <= r_outer - eps`.
    Bulk,
    BandB,
    /// `|x| >= r_outer + eps`.
    Exterior,
}

impl Region {
    pub fn is_band(self) -> bool {
        matches!(self, Region::BandH | Region::BandB)
    }
}

/// Pointwise weights of the phase field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub phi: f64,
    pub omega: f64,
    pub grad_omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseField {
    pub geometry: AnnulusGeometry,
    pub epsilon: f64,
}

impl PhaseField {
    pub fn new(geometry: AnnulusGeometry, epsilon: f64) -> Result<Self, GeometryError> {
        geometry.validate()?;
        if !(epsilon > 0.0 && epsilon <= MAX_EPSILON && epsilon < geometry.max_epsilon()) {
            return Err(GeometryError::InvalidEpsilon(epsilon));
        }
        Ok(PhaseField { geometry, epsilon })
    }

    /// The four circles bounding the two bands, ascending.
    pub fn band_radii(&self) -> [f64; 4] {
        let g = &self.geometry;
        let e = self.epsilon;
        [g.r_inner - e, g.r_inner + e, g.r_outer - e, g.r_outer + e]
    }

    pub fn region_of_radius(&self, r: f64) -> Region {
        let [a, b, c, d] = self.band_radii();
        if r <= a {
            Region::Core
        } else if r < b {
            Region::BandH
        } else if r <= c {
            Region::Bulk
        } else if r < d {
            Region::BandB
        } else {
            Region::Exterior
        }
    }

    pub fn region(&self, x: [f64; 2]) -> Region {
        self.region_of_radius(norm(x))
    }

    pub fn weights(&self, x: [f64; 2]) -> Weights {
        let r = norm(x);
        self.weights_in(r, self.region_of_radius(r))
    }

    /// Weights at radius `r`, with the band indicator taken from `region`
    /// rather than from `r`.
    pub fn weights_in(&self, r: f64, region: Region) -> Weights {
        let d = signed_distance_radial(&self.geometry, r);
        let phi = match region {
            Region::Bulk => 1.0,
            Region::Core | Region::Exterior => -1.0,
            _ => sigmoid(-d / self.epsilon),
        };
        let grad_omega = if region.is_band() { 0.5 / self.epsilon } else { 0.0 };
        Weights { phi, omega: 0.5 * (1.0 + phi), grad_omega }
    }

    pub fn phase_and_weights(&self, x: [f64; 2]) -> (f64, f64, f64) {
        let w = self.weights(x);
        (w.phi, w.omega, w.grad_omega)
    }

    /// Closest point on the nearest interface and the signed distance.
    pub fn closest_boundary_point(&self, x: [f64; 2]) -> Result<([f64; 2], f64), GeometryError> {
        let r = norm(x);
        let d = self.geometry.signed_distance(x);
        if r == 0.0 || d.abs() >= self.epsilon {
            return Err(GeometryError::OutOfBand(x[0], x[1]));
        }
        let which = self.geometry.nearest_interface(x);
        let s = self.geometry.radius(which) / r;
        Ok(([s * x[0], s * x[1]], d))
    }

    /// Value of the normal-constant extension of boundary data given as a
    /// function of the polar angle.
    pub fn extend_constant<F: Fn(f64) -> f64>(
        &self,
        boundary_values: F,
        which: Interface,
        x: [f64; 2],
    ) -> Result<f64, GeometryError> {
        let (xbar, _) = self.closest_boundary_point(x)?;
        if self.geometry.nearest_interface(x) != which {
            return Err(GeometryError::OutOfBand(x[0], x[1]));
        }
        Ok(boundary_values(xbar[1].atan2(xbar[0])))
    }
}

/// Anisotropic conductivity with eigenvectors along the polar frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConductivityTensor {
    pub tangential: f64,
    pub radial: f64,
}

impl Default for ConductivityTensor {
    fn default() -> Self {
        ConductivityTensor { tangential: 1.0, radial: 0.3 }
    }
}

impl ConductivityTensor {
    pub fn new(tangential: f64, radial: f64) -> Result<Self, GeometryError> {
        if !(tangential > 0.0 && radial > 0.0 && tangential.is_finite() && radial.is_finite()) {
            return Err(GeometryError::InvalidTensor(tangential, radial));
        }
        Ok(ConductivityTensor { tangential, radial })
    }

    pub fn identity() -> Self {
        ConductivityTensor { tangential: 1.0, radial: 1.0 }
    }

    /// Ellipticity constant `m` with `m|xi|^2 <= xi.M xi <= |xi|^2 / m`.
    pub fn ellipticity(&self) -> f64 {
        let lo = self.tangential.min(self.radial);
        let hi = self.tangential.max(self.radial);
        lo.min(1.0 / hi)
    }

    /// Symmetric matrix `[m00, m01, m11]` at `x`. Isotropic at the origin.
    pub fn eval(&self, x: [f64; 2]) -> [f64; 3] {
        let r = norm(x);
        if r == 0.0 {
            let a = 0.5 * (self.tangential + self.radial);
            return [a, 0.0, a];
        }
        let (c, s) = (x[0] / r, x[1] / r);
        let (a, b) = (self.radial, self.tangential);
        [a * c * c + b * s * s, (a - b) * c * s, a * s * s + b * c * c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g() -> AnnulusGeometry {
        AnnulusGeometry::default()
    }

    #[test]
    fn signed_distance_examples() {
        assert!((signed_distance(&g(), [0.65, 0.0]) + 0.35).abs() < 1e-15);
        assert!((signed_distance(&g(), [0.0, 0.2]) - 0.1).abs() < 1e-15);
        assert!((signed_distance(&g(), [1.1, 0.0]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn phase_examples() {
        let eps = 0.1;
        let f = PhaseField::new(g(), eps).unwrap();
        let at = |d: f64| f.phase_and_weights([1.0 + d, 0.0]);
        let (p, o, n) = at(0.0);
        assert_eq!((p, o), (0.0, 0.5));
        assert!((n - 1.0 / (2.0 * eps)).abs() < 1e-14);
        let (p, o, n) = at(-2.0 * eps);
        assert_eq!((p, o, n), (1.0, 1.0, 0.0));
        let (p, o, n) = at(eps / 2.0);
        assert!((p + 0.5).abs() < 1e-12 && (o - 0.25).abs() < 1e-12);
        assert!((n - 5.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_wide_bands() {
        assert!(PhaseField::new(g(), 0.3).is_err());
        assert!(PhaseField::new(g(), 0.0).is_err());
        assert!(PhaseField::new(g(), 0.25).is_ok());
    }

    #[test]
    fn boundary_weight_examples() {
        assert_eq!(g().boundary_weight(Interface::H, [0.3, 0.0]), 1.0);
        assert_eq!(g().boundary_weight(Interface::H, [1.0, 0.0]), 0.0);
        assert_eq!(g().boundary_weight(Interface::B, [0.0, 1.0]), 1.0);
    }

    #[test]
    fn closest_point_examples() {
        let f = PhaseField::new(g(), 0.1).unwrap();
        let (xb, d) = f.closest_boundary_point([0.35, 0.0]).unwrap();
        assert!((xb[0] - 0.3).abs() < 1e-15 && xb[1] == 0.0 && (d + 0.05).abs() < 1e-15);
        let (xb, d) = f.closest_boundary_point([0.0, 1.05]).unwrap();
        assert!(xb == [0.0, 1.0] && (d - 0.05).abs() < 1e-15);
        for eps in [0.01, 0.1, 0.2, 0.25] {
            let f = PhaseField::new(g(), eps).unwrap();
            assert!(f.closest_boundary_point([0.65, 0.0]).is_err());
        }
    }

    #[test]
    fn extension_examples() {
        let f = PhaseField::new(g(), 0.1).unwrap();
        let v = f.extend_constant(f64::cos, Interface::H, [0.35, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let v = f.extend_constant(f64::sin, Interface::B, [0.0, 0.95]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let v = f.extend_constant(|_| 2.5, Interface::B, [0.7, 0.7]).unwrap();
        assert_eq!(v, 2.5);
    }

    #[test]
    fn tensor_eigen_structure() {
        let m = ConductivityTensor::default();
        let x = [0.6, -0.8];
        let [a, b, c] = m.eval(x);
        let n = [0.6, -0.8];
        let mn = [a * n[0] + b * n[1], b * n[0] + c * n[1]];
        assert!((mn[0] - 0.3 * n[0]).abs() < 1e-15 && (mn[1] - 0.3 * n[1]).abs() < 1e-15);
        assert!((m.ellipticity() - 0.3).abs() < 1e-15);
    }
}
