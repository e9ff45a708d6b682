use std::f64::consts::PI;

use diffuse_cauchy::assembly::{assemble_operators, assemble_sharp};
use diffuse_cauchy::geometry::{norm, AnnulusGeometry, ConductivityTensor, PhaseField};
use diffuse_cauchy::inversion::*;
use diffuse_cauchy::mesh::{build_background, mesh_annulus, quadrature, refine_band, TriMesh};
use diffuse_cauchy::sparse::dot;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn default_truth(tensor: ConductivityTensor) -> GroundTruth {
    let w = FourierSeries { cos: vec![(2, 1.0)], sin: vec![(3, 0.5)] };
    GroundTruth::new(w, AnnulusGeometry::default(), tensor).unwrap()
}

fn nodal_on(mesh: &TriMesh, nodes: &[usize], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut x = vec![0.0; mesh.n_vertices()];
    for &i in nodes {
        x[i] = f(angle(mesh.vertices[i]));
    }
    x
}

/// Max nodal error of the sharp state for `u = cos theta`, isotropic
/// conductivity, against `a r cos + b cos / r`.
fn isotropic_cos_error(n_ang: usize, n_rad: usize) -> f64 {
    let (r0, r1) = (0.3f64, 1.0f64);
    // -(a - b / r0^2) = 1 and a - b / r1^2 = 0.
    let a = 1.0 / (r1 * r1 / (r0 * r0) - 1.0);
    let b = a * r1 * r1;
    let mesh = mesh_annulus(&AnnulusGeometry::default(), n_ang, n_rad).unwrap();
    let ops = assemble_sharp(&mesh, &ConductivityTensor::identity()).unwrap();
    let u = nodal_on(&mesh, &ops.inner_nodes, f64::cos);
    let (v, f) = sharp_forward(&ops, &u).unwrap();
    let mut err = 0.0f64;
    for (i, &x) in mesh.vertices.iter().enumerate() {
        let (r, c) = (norm(x), angle(x).cos());
        err = err.max((v[i] - (a * r + b / r) * c).abs());
    }
    for &i in &ops.outer_nodes {
        assert_eq!(f[i], v[i]);
    }
    err
}

#[test]
fn sharp_forward_matches_separable_harmonic() {
    let e1 = isotropic_cos_error(64, 16);
    let e2 = isotropic_cos_error(128, 32);
    assert!(e2 < 2e-3, "{e2}");
    assert!(e1 / e2 > 3.0, "ratio {}", e1 / e2);
}

#[test]
fn sharp_forward_matches_modal_solution_for_anisotropic_tensor() {
    let tensor = ConductivityTensor::default();
    let truth = default_truth(tensor);
    let mesh = mesh_annulus(&AnnulusGeometry::default(), 256, 64).unwrap();
    let ops = assemble_sharp(&mesh, &tensor).unwrap();
    let u = nodal_on(&mesh, &ops.inner_nodes, |t| truth.u(t));
    let (_, f) = sharp_forward(&ops, &u).unwrap();
    let scale = truth.f_norm_sq().sqrt();
    let mut d = vec![0.0; f.len()];
    for &i in &ops.outer_nodes {
        d[i] = f[i] - truth.f(angle(mesh.vertices[i]));
    }
    let err = ops.t_outer.quad_form(&d).sqrt() / scale;
    assert!(err < 5e-3, "{err}");
}

#[test]
fn forward_is_linear() {
    let mesh = mesh_annulus(&AnnulusGeometry::default(), 48, 8).unwrap();
    let ops = assemble_sharp(&mesh, &ConductivityTensor::default()).unwrap();
    let s = SharpSolver::new(&ops).unwrap();
    let u1 = nodal_on(&mesh, &ops.inner_nodes, |t| (2.0 * t).cos());
    let u2 = nodal_on(&mesh, &ops.inner_nodes, |t| t.sin() + 0.3);
    let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
    let (a, _) = s.forward(&u1);
    let (b, _) = s.forward(&u2);
    let (c, _) = s.forward(&sum);
    for i in 0..c.len() {
        assert!((c[i] - a[i] - b[i]).abs() < 1e-12);
    }
}

#[test]
fn adjoint_consistency_on_random_pairs() {
    let mesh = mesh_annulus(&AnnulusGeometry::default(), 64, 12).unwrap();
    let ops = assemble_sharp(&mesh, &ConductivityTensor::default()).unwrap();
    let s = SharpSolver::new(&ops).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let mut u = vec![0.0; mesh.n_vertices()];
        let mut w = vec![0.0; mesh.n_vertices()];
        for &i in &ops.inner_nodes {
            u[i] = rng.random_range(-1.0..1.0);
        }
        for &i in &ops.outer_nodes {
            w[i] = rng.random_range(-1.0..1.0);
        }
        let (_, fu) = s.forward(&u);
        let (_, fw) = s.adjoint(&w);
        let lhs = ops.t_outer.bilinear(&fu, &w);
        let rhs = ops.t_inner.bilinear(&u, &fw);
        let scale = ops.t_inner.quad_form(&u).sqrt() * ops.t_outer.quad_form(&w).sqrt();
        assert!((lhs - rhs).abs() <= 1e-10 * scale, "{lhs} vs {rhs}");
    }
}

#[test]
fn adjoint_of_zero_and_default_density_is_mean_free() {
    let tensor = ConductivityTensor::default();
    let truth = default_truth(tensor);
    let mesh = mesh_annulus(&AnnulusGeometry::default(), 128, 24).unwrap();
    let ops = assemble_sharp(&mesh, &tensor).unwrap();
    let (_, u0) = sharp_adjoint(&ops, &vec![0.0; mesh.n_vertices()]).unwrap();
    assert!(u0.iter().all(|&x| x == 0.0));
    let w = nodal_on(&mesh, &ops.outer_nodes, |t| truth.w.eval(t));
    let (_, u) = sharp_adjoint(&ops, &w).unwrap();
    assert!(dot(&ops.mean_vec_sharp, &u).abs() < 1e-12);
    // The adjoint trace approximates the analytic u = F* w.
    let mut d = vec![0.0; u.len()];
    for &i in &ops.inner_nodes {
        d[i] = u[i] - truth.u(angle(mesh.vertices[i]));
    }
    let rel = ops.t_inner.quad_form(&d).sqrt() / truth.u_norm_sq().sqrt();
    assert!(rel < 1e-2, "{rel}");
}

struct Diffuse {
    mesh: TriMesh,
    ops: diffuse_cauchy::assembly::OperatorSet,
    truth: GroundTruth,
    f_tilde: Vec<f64>,
}

fn diffuse_setup(eps: f64) -> Diffuse {
    let tensor = ConductivityTensor::default();
    let field = PhaseField::new(AnnulusGeometry::default(), eps).unwrap();
    let mesh = refine_band(&build_background(0.2).unwrap(), &field, 2).unwrap();
    let ops = assemble_operators(&mesh, &tensor, &field, &quadrature(2, 1).unwrap()).unwrap();
    let truth = default_truth(tensor);
    let samples = AngularSamples::from_fn(512, |t| truth.f(t));
    let f_tilde = extend_data(&samples, &mesh, &ops);
    Diffuse { mesh, ops, truth, f_tilde }
}

#[test]
fn diffuse_tikhonov_properties() {
    let d = diffuse_setup(0.125);
    let s = SolverSettings::default();

    let zero = vec![0.0; d.f_tilde.len()];
    let (sol, rep) = diffuse_tikhonov(&d.ops, 1.0, &zero, &s).unwrap();
    assert!(rep.converged);
    assert!(sol.u.iter().chain(&sol.v).chain(&sol.p).all(|&x| x == 0.0));

    let mut last = f64::INFINITY;
    for alpha in [1.0, 10.0, 100.0] {
        let (sol, rep) = diffuse_tikhonov(&d.ops, alpha, &d.f_tilde, &s).unwrap();
        assert!(rep.converged);
        let nu = d.ops.b_h.quad_form(&sol.u).sqrt();
        assert!(nu < last, "alpha {alpha}: {nu} >= {last}");
        last = nu;
        // alpha B_H u - B_H p vanishes on the control set.
        let r: Vec<f64> = sol.u.iter().zip(&sol.p).map(|(u, p)| alpha * u - p).collect();
        let g = d.ops.b_h.matvec(&r);
        let gmax = d.ops.active_u.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
        let pmax = d.ops.b_h.matvec(&sol.p).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(gmax <= 1e-7 * pmax.max(1e-300), "{gmax} vs {pmax}");
        assert!(dot(&d.ops.mean_vec, &sol.v).abs() < 1e-8);
        assert!(dot(&d.ops.mean_vec, &sol.p).abs() < 1e-8);
    }
}

#[test]
fn error_norms_vanish_at_the_extended_truth() {
    let d = diffuse_setup(0.125);
    let ev = ErrorEvaluator::new(&d.ops, &d.mesh, &d.truth).unwrap();
    let sol = diffuse_cauchy::saddle_solver::SaddleSolution {
        u: ev.u_ext.clone(),
        v: ev.f_ext.clone(),
        p: vec![0.0; d.f_tilde.len()],
        mu_v: 0.0,
        mu_p: 0.0,
    };
    let e = ev.evaluate(&sol);
    assert!(e.u_err_band < 1e-12 && e.v_err_band < 1e-12 && e.u_err_dual < 1e-12);
    let twice = diffuse_cauchy::saddle_solver::SaddleSolution {
        u: sol.u.iter().map(|x| x + 1.0).collect(),
        ..sol.clone()
    };
    let twice2 = diffuse_cauchy::saddle_solver::SaddleSolution {
        u: sol.u.iter().map(|x| x + 2.0).collect(),
        ..sol.clone()
    };
    let (a, b) = (ev.evaluate(&twice).u_err_band, ev.evaluate(&twice2).u_err_band);
    assert!((b / a - 2.0).abs() < 1e-12);
    // Dual norm bounded by the band norm times a trace-type constant.
    let e1 = ev.evaluate(&twice);
    assert!(e1.u_err_dual <= 10.0 * e1.u_err_band);
}

#[test]
fn extended_data_norm_tracks_the_boundary_norm() {
    let truth = default_truth(ConductivityTensor::default());
    let exact = truth.f_norm_sq().sqrt();
    let mut devs = vec![];
    for eps in [0.25, 0.125, 0.0625] {
        let d = diffuse_setup(eps);
        let n = d.ops.b_b.quad_form(&d.f_tilde).sqrt();
        devs.push((n / exact - 1.0).abs());
    }
    assert!(devs[2] < devs[0], "{devs:?}");
    assert!(devs[2] < 5e-3, "{devs:?}");
}

#[test]
fn extension_is_constant_along_normals() {
    let d = diffuse_setup(0.125);
    let c = AngularSamples::from_fn(64, |_| 2.5);
    let f = extend_data(&c, &d.mesh, &d.ops);
    let bd = d.ops.b_b.diagonal();
    for (i, &x) in f.iter().enumerate() {
        if bd[i] > 0.0 {
            assert!((x - 2.5).abs() < 1e-14 || bd[i] <= 1e-14 * 1.0);
        }
    }
    let cos = AngularSamples::from_fn(256, f64::cos);
    assert!(cos.eval(PI / 2.0).abs() < 1e-12);
}

#[test]
fn sharp_tikhonov_regularization_convergence() {
    let tensor = ConductivityTensor::default();
    let truth = default_truth(tensor);
    let mesh = mesh_annulus(&AnnulusGeometry::default(), 128, 32).unwrap();
    let ops = assemble_sharp(&mesh, &tensor).unwrap();
    let f = nodal_on(&mesh, &ops.outer_nodes, |t| truth.f(t));
    let u_true = nodal_on(&mesh, &ops.inner_nodes, |t| truth.u(t));
    let s = SolverSettings::default();
    let mut last = f64::INFINITY;
    for alpha in [1e-2, 1e-4, 1e-6] {
        let (sol, rep) = sharp_tikhonov(&ops, alpha, &f, &s).unwrap();
        assert!(rep.converged);
        let e = sharp_error_norms(&sol, &truth, &ops, &mesh);
        assert!(e.u_err_sharp.unwrap() < last, "alpha {alpha}");
        last = e.u_err_sharp.unwrap();
        // u = p on the inner circle.
        for &i in &ops.inner_nodes {
            assert!((alpha * sol.u[i] - sol.p[i]).abs() < 1e-6 * (1.0 + sol.p[i].abs()));
        }
        // Minimizer property against the discrete truth pair.
        let (v_true, _) = sharp_forward(&ops, &u_true).unwrap();
        let j = tikhonov_value(&ops.t_outer, &ops.t_inner, alpha, &sol.u, &sol.v, &f);
        let jt = tikhonov_value(&ops.t_outer, &ops.t_inner, alpha, &u_true, &v_true, &f);
        assert!(j <= jt * (1.0 + 1e-8), "{j} > {jt}");
    }
}

#[test]
fn noise_free_pipeline_is_bit_identical() {
    let a = diffuse_setup(0.125);
    let b = diffuse_setup(0.125);
    let s = SolverSettings::default();
    let (x, _) = diffuse_tikhonov(&a.ops, 1e-3, &a.f_tilde, &s).unwrap();
    let (y, _) = diffuse_tikhonov(&b.ops, 1e-3, &b.f_tilde, &s).unwrap();
    assert_eq!(x, y);
}

#[test]
fn diffuse_controls_approach_the_sharp_control() {
    let tensor = ConductivityTensor::default();
    let truth = default_truth(tensor);
    let sharp_mesh = mesh_annulus(&AnnulusGeometry::default(), 256, 64).unwrap();
    let sops = assemble_sharp(&sharp_mesh, &tensor).unwrap();
    let f = nodal_on(&sharp_mesh, &sops.outer_nodes, |t| truth.f(t));
    let s = SolverSettings::default();
    let alpha = 1e-3;
    let (sharp, _) = sharp_tikhonov(&sops, alpha, &f, &s).unwrap();
    let u_sharp = AngularSamples {
        values: {
            let mut v: Vec<(f64, f64)> = sops
                .inner_nodes
                .iter()
                .map(|&i| (angle(sharp_mesh.vertices[i]).rem_euclid(2.0 * PI), sharp.u[i]))
                .collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            v.into_iter().map(|x| x.1).collect()
        },
    };
    let samples = outer_samples(&sharp_mesh, &sops, &f);
    let mut last = f64::INFINITY;
    for eps in [0.125, 0.0625, 0.03125] {
        let field = PhaseField::new(AnnulusGeometry::default(), eps).unwrap();
        let spacing = 0.1;
        let levels = ((spacing * 2.0 / eps).log2().ceil()).max(0.0) as u32;
        let mesh = refine_band(&build_background(0.1).unwrap(), &field, levels).unwrap();
        let ops = assemble_operators(&mesh, &tensor, &field, &quadrature(2, 1).unwrap()).unwrap();
        let f_tilde = extend_data(&samples, &mesh, &ops);
        let (sol, _) = diffuse_tikhonov(&ops, alpha, &f_tilde, &s).unwrap();
        let ext = extend_function(&mesh, &ops.b_h.diagonal(), |t| u_sharp.eval(t));
        let d: Vec<f64> = sol.u.iter().zip(&ext).map(|(a, b)| a - b).collect();
        let e = ops.b_h.quad_form(&d).sqrt();
        assert!(e < last, "eps {eps}: {e} >= {last}");
        last = e;
    }
}
