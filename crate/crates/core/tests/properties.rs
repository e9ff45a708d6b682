use diffuse_cauchy::experiments::fit_loglog_slope;
use diffuse_cauchy::geometry::{AnnulusGeometry, PhaseField, Region};
use diffuse_cauchy::mesh::{build_background, quadrature, refine_band, TriMesh};
use diffuse_cauchy::saddle_solver::minres_with;
use diffuse_cauchy::sparse::{Cholesky, Coo};
use proptest::prelude::*;

fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn phase_weights_are_consistent(x in -1.5f64..1.5, y in -1.5f64..1.5, k in 2i32..7) {
        let eps = 0.5f64.powi(k);
        let f = PhaseField::new(AnnulusGeometry::default(), eps).unwrap();
        let w = f.weights([x, y]);
        prop_assert!((-1.0..=1.0).contains(&w.phi));
        prop_assert!((w.omega - 0.5 * (1.0 + w.phi)).abs() < 1e-15);
        let band = f.region([x, y]).is_band();
        prop_assert_eq!(w.grad_omega != 0.0, band);
        if band {
            prop_assert!((w.grad_omega - 0.5 / eps).abs() < 1e-12);
        }
        let d = f.geometry.signed_distance([x, y]);
        if d <= -eps {
            prop_assert_eq!(w.omega, 1.0);
            prop_assert_eq!(f.region([x, y]), Region::Bulk);
        }
        if d >= eps {
            prop_assert_eq!(w.omega, 0.0);
        }
    }

    #[test]
    fn quadrature_is_exact_for_monomials(a in 0u32..5, b in 0u32..5, k in 1u32..4) {
        prop_assume!(a + b <= 4);
        let want = factorial(a) * factorial(b) / factorial(a + b + 2);
        for degree in (a + b).max(1)..=4 {
            let r = quadrature(degree, k).unwrap();
            let got = r.integrate(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], |p| p[0].powi(a as i32) * p[1].powi(b as i32));
            prop_assert!((got - want).abs() < 1e-13, "degree {} got {} want {}", degree, got, want);
        }
    }

    #[test]
    fn quadrature_is_affine_invariant(
        c in proptest::array::uniform6(-2.0f64..2.0),
        q in proptest::array::uniform6(-1.0f64..1.0),
    ) {
        let t = [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]]];
        let area = 0.5 * ((t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1]));
        prop_assume!(area.abs() > 1e-3);
        let p = |x: [f64; 2]| q[0] + q[1] * x[0] + q[2] * x[1] + q[3] * x[0] * x[0] + q[4] * x[0] * x[1] + q[5] * x[1] * x[1];
        let i2 = quadrature(2, 1).unwrap().integrate(&t, p);
        let i4 = quadrature(4, 3).unwrap().integrate(&t, p);
        prop_assert!((i2 - i4).abs() < 1e-11 * (1.0 + i4.abs()));
    }

    #[test]
    fn csr_matches_dense(entries in proptest::collection::vec((0usize..6, 0usize..5, -3.0f64..3.0), 0..30),
                         x in proptest::array::uniform5(-1.0f64..1.0)) {
        let mut c = Coo::new(6, 5);
        let mut dense = [[0.0f64; 5]; 6];
        for &(i, j, v) in &entries {
            c.push(i, j, v);
            dense[i][j] += v;
        }
        let a = c.to_csr();
        let y = a.matvec(&x);
        for i in 0..6 {
            let want: f64 = (0..5).map(|j| dense[i][j] * x[j]).sum();
            prop_assert!((y[i] - want).abs() < 1e-12);
        }
        prop_assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn cholesky_solves_spd_systems(d in proptest::collection::vec(0.5f64..3.0, 3..12),
                                   off in proptest::collection::vec(-0.2f64..0.2, 12)) {
        let n = d.len();
        let mut c = Coo::new(n, n);
        for i in 0..n {
            c.push(i, i, d[i]);
            if i + 1 < n {
                c.push(i, i + 1, off[i]);
                c.push(i + 1, i, off[i]);
            }
        }
        let a = c.to_csr();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = Cholesky::factor(&a).unwrap().solve(&b);
        let r = a.matvec(&x);
        for i in 0..n {
            prop_assert!((r[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn minres_residuals_never_increase(d in proptest::collection::vec(prop_oneof![-4.0f64..-0.5, 0.5f64..4.0], 4..30)) {
        let n = d.len();
        let mut c = Coo::new(n, n);
        for (i, &v) in d.iter().enumerate() {
            c.push(i, i, v);
        }
        let a = c.to_csr();
        let b = vec![1.0; n];
        let p: Vec<f64> = d.iter().map(|v| 1.0 / v.abs()).collect();
        let r = minres_with(&a, &b, |x| x.iter().zip(&p).map(|(a, b)| a * b).collect(), 1e-12, 200).unwrap();
        prop_assert!(r.converged);
        prop_assert!(r.residual_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-10)));
        for i in 0..n {
            prop_assert!((r.solution[i] * d[i] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn power_laws_recover_their_exponent(c in 0.01f64..100.0, p in 0.1f64..2.0, n in 2usize..8) {
        let pts: Vec<(f64, f64)> = (0..n).map(|k| 0.5f64.powi(k as i32)).map(|d| (d, c * d.powf(p))).collect();
        let f = fit_loglog_slope(&pts, None).unwrap();
        prop_assert!((f.slope - p).abs() < 1e-10);
        prop_assert!((f.r_squared - 1.0).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn refined_meshes_conform_and_roundtrip(h0 in 0.15f64..0.6, k in 2i32..5, levels in 0u32..3) {
        let f = PhaseField::new(AnnulusGeometry::default(), 0.5f64.powi(k)).unwrap();
        let m = refine_band(&build_background(h0).unwrap(), &f, levels).unwrap();
        prop_assert!(m.is_conforming());
        prop_assert!(m.min_angle_deg() >= 20.0);
        prop_assert!((m.total_area() - 9.0).abs() < 1e-10);
        let back = TriMesh::from_text(&m.to_text()).unwrap();
        prop_assert!(back.same_topology_and_coordinates(&m));
    }
}
