//! Transport solver against independent references: a dense assembly of the
//! upwind finite-volume system, analytic attenuation along straight rays,
//! and the v ↦ -v symmetry of the ordinate set.

use nalgebra::{DMatrix, DVector};
use qfpat_core::grid::{FaceNeighbor, GRAZING_EPS};
use qfpat_core::rte::Sense;
use qfpat_core::*;

mod common;
use common::ballistic_error;

const TOL: f64 = 1e-12;

fn krylov() -> SolverOptions {
    SolverOptions::krylov(TOL)
}

fn hg_row(ords: &OrdinateSet, g: f64, j: usize) -> Vec<f64> {
    let vj = ords.direction(j);
    let theta = |c: f64| (1.0 - g * g) / (2.0 * std::f64::consts::PI * (1.0 + g * g - 2.0 * g * c));
    let raw: Vec<f64> = (0..ords.len())
        .map(|k| {
            let vk = ords.direction(k);
            ords.weights()[k] * theta(vj[0] * vk[0] + vj[1] * vk[1])
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|r| r / s).collect()
}

/// Dense upwind system `A u = b` for the forward sense, unknown index
/// `k * n_cells + c`.
struct Dense {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

fn assemble(disc: &Discretization, p: &TransportProblem, g: f64) -> Dense {
    let mesh = disc.mesh();
    let ords = disc.ordinates();
    let (nc, nk) = (mesh.n_cells(), ords.len());
    let idx = |c: usize, k: usize| k * nc + c;
    let mut a = DMatrix::zeros(nc * nk, nc * nk);
    let mut b = DVector::zeros(nc * nk);
    for k in 0..nk {
        let v = ords.direction(k);
        let row_k = hg_row(ords, g, k);
        for c in 0..nc {
            let area = mesh.cell_areas()[c];
            let i = idx(c, k);
            a[(i, i)] += area * p.sigma_t.values()[c];
            for (kk, m) in row_k.iter().enumerate() {
                a[(i, idx(c, kk))] -= area * p.sigma_s.values()[c] * m;
                if let Some(iso) = &p.sigma_iso {
                    a[(i, idx(c, kk))] -= area * iso.values()[c] * ords.weights()[kk];
                }
            }
            for face in mesh.faces(c) {
                let flux = (v[0] * face.normal[0] + v[1] * face.normal[1]) * face.length;
                if flux >= -GRAZING_EPS * face.length {
                    a[(i, i)] += flux;
                    continue;
                }
                match face.neighbor {
                    FaceNeighbor::Cell(up) => a[(i, idx(up, k))] += flux,
                    FaceNeighbor::Boundary(e) => {
                        if let Some(inflow) = &p.inflow {
                            b[i] -= flux * inflow.get(e, k);
                        }
                    }
                }
            }
            b[i] += area
                * match &p.source {
                    VolumeSource::None => 0.0,
                    VolumeSource::Isotropic(q) => q.values()[c],
                    VolumeSource::Angular(q) => q.get(c, k),
                };
        }
    }
    Dense { a, b }
}

fn to_vec(u: &AngularField) -> DVector<f64> {
    let (nc, nk) = (u.n_cells(), u.n_ords());
    DVector::from_fn(nc * nk, |i, _| u.get(i % nc, i / nc))
}

fn rel_diff(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (x - y).norm() / y.norm()
}

fn medium(disc: &Discretization) -> (ScalarField, ScalarField) {
    let m = disc.mesh();
    let sigma_s = m.sample(|x, y| 1.0 + 0.5 * (2.0 * x).sin() * y);
    let sigma_t = sigma_s.add(&m.sample(|x, y| 0.2 + 0.1 * (x + y).cos()));
    (sigma_t, sigma_s)
}

fn angular_source(disc: &Discretization) -> AngularField {
    let cent = disc.mesh().cell_centroids().to_vec();
    AngularField::from_fn(disc.n_cells(), disc.n_ords(), |c, k| {
        1.0 + 0.5 * (3.0 * cent[c][0] + k as f64).sin()
    })
}

#[test]
fn forward_solve_matches_dense_direct_solve() {
    let disc = Discretization::build(4, 8).unwrap();
    let (sigma_t, sigma_s) = medium(&disc);
    let inflow = BoundarySource::from_fn(disc.mesh(), disc.ordinates(), |e, k| 1.0 + 0.1 * ((e + 3 * k) % 5) as f64);
    for g in [0.0, 0.5, -0.3] {
        let p = TransportProblem::new(sigma_t.clone(), sigma_s.clone(), ScatteringKernel::HenyeyGreenstein { g })
            .with_source(VolumeSource::Angular(angular_source(&disc)))
            .with_inflow(inflow.clone());
        let d = assemble(&disc, &p, g);
        let exact = d.a.lu().solve(&d.b).unwrap();
        for opts in [krylov(), SolverOptions::source_iteration(TOL)] {
            let (u, rep) = solve_rte(&disc, &p, &opts).unwrap();
            assert!(rep.converged);
            let e = rel_diff(&to_vec(&u), &exact);
            assert!(e < 1e-9, "g = {g}, {:?}: relative difference {e:e}", opts.scheme);
        }
    }
}

#[test]
fn conservative_medium_matches_dense_direct_solve() {
    let disc = Discretization::build(4, 8).unwrap();
    let m = disc.mesh();
    let sigma_s = m.sample(|x, y| 2.0 + x * y);
    let q = m.sample(|x, _| 1.0 + 0.5 * x);
    // σ_t = σ_s: nothing is absorbed.
    let p = TransportProblem::new(sigma_s.clone(), sigma_s, ScatteringKernel::Isotropic)
        .with_source(VolumeSource::Isotropic(q));
    let d = assemble(&disc, &p, 0.0);
    let exact = d.a.lu().solve(&d.b).unwrap();
    let (u, rep) = solve_rte(&disc, &p, &krylov()).unwrap();
    assert!(rep.converged && u.is_finite());
    assert!(rel_diff(&to_vec(&u), &exact) < 1e-9);
    // The same medium written as absorption plus an isotropic gain.
    let sigma_a = m.sample(|x, _| 0.3 + 0.1 * x);
    let sigma_s2 = m.sample(|x, y| 1.7 + x * y - 0.1 * x);
    let p2 = TransportProblem::new(sigma_a.add(&sigma_s2), sigma_s2, ScatteringKernel::HenyeyGreenstein { g: 0.4 })
        .with_isotropic_gain(sigma_a)
        .with_source(VolumeSource::Isotropic(m.sample(|_, y| 1.0 - 0.3 * y)));
    let d2 = assemble(&disc, &p2, 0.4);
    let exact2 = d2.a.lu().solve(&d2.b).unwrap();
    let (u2, _) = solve_rte(&disc, &p2, &krylov()).unwrap();
    assert!(rel_diff(&to_vec(&u2), &exact2) < 1e-9);
}

#[test]
fn adjoint_solve_is_weighted_transpose_of_dense_system() {
    // S = A⁻¹B with B = diag(area); under W = diag(area · w_k) the adjoint is
    // S* = W⁻¹ B A⁻ᵀ W.
    let disc = Discretization::build(4, 8).unwrap();
    let (sigma_t, sigma_s) = medium(&disc);
    let g = 0.6;
    let kernel = ScatteringKernel::HenyeyGreenstein { g };
    let src = angular_source(&disc);
    let base = TransportProblem::new(sigma_t, sigma_s, kernel);
    let d = assemble(&disc, &base, g);
    let (nc, nk) = (disc.n_cells(), disc.n_ords());
    let areas = disc.mesh().cell_areas();
    let w = DVector::from_fn(nc * nk, |i, _| areas[i % nc] * disc.ordinates().weights()[i / nc]);
    let rhs = DVector::from_fn(nc * nk, |i, _| w[i] * src.get(i % nc, i / nc));
    let y = d.a.transpose().lu().solve(&rhs).unwrap();
    let expect = DVector::from_fn(nc * nk, |i, _| areas[i % nc] * y[i] / w[i]);
    let (u, _) = solve_adjoint_rte(&disc, &base.with_source(VolumeSource::Angular(src)), &krylov()).unwrap();
    assert!(rel_diff(&to_vec(&u), &expect) < 1e-9);
}

#[test]
fn pure_absorption_adjoint_is_reflected_forward_solve() {
    let disc = Discretization::build(6, 12).unwrap();
    let m = disc.mesh();
    let sigma_a = m.sample(|x, y| 0.5 + 0.3 * (x - y).sin());
    let src = angular_source(&disc);
    let p = TransportProblem::new(sigma_a.clone(), ScalarField::zeros(disc.n_cells()), ScatteringKernel::Isotropic);
    let (adj, _) = solve_adjoint_rte(&disc, &p.clone().with_source(VolumeSource::Angular(src.clone())), &krylov()).unwrap();
    let reflected = src.reflect(disc.ordinates());
    let (fwd, _) = solve_rte(&disc, &p.with_source(VolumeSource::Angular(reflected)), &krylov()).unwrap();
    let back = fwd.reflect(disc.ordinates());
    let diff = adj.values().iter().zip(back.values()).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(diff < 1e-13 * adj.max_abs(), "{diff:e}");
}

#[test]
fn ballistic_attenuation_converges_at_first_order() {
    let errors: Vec<f64> = [16, 32, 64].iter().map(|&n| ballistic_error(n, 16, 1.0)).collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..=3.0).contains(&ratio), "errors {errors:?}");
    }
    assert!(errors[2] < 0.02, "{errors:?}");
}

#[test]
fn source_iteration_contracts_at_scattering_ratio() {
    let disc = Discretization::build(8, 16).unwrap();
    let m = disc.mesh();
    let sigma_t = m.sample(|x, _| 2.0 + 0.5 * x);
    let ratio = 0.3;
    let p = TransportProblem::new(sigma_t.clone(), sigma_t.scale(ratio), ScatteringKernel::HenyeyGreenstein { g: 0.3 })
        .with_inflow(BoundarySource::uniform(m, disc.ordinates(), 1.0));
    let (_, rep) = solve_rte(&disc, &p, &SolverOptions::source_iteration(1e-12)).unwrap();
    let h = &rep.residual_history;
    assert!(h.len() > 5);
    for w in h[2..].windows(2) {
        assert!(w[1] < w[0]);
        assert!(w[1] <= ratio * w[0] * (1.0 + 1e-9), "{} > {ratio} x {}", w[1], w[0]);
    }
}

#[test]
fn larger_source_gives_larger_solution() {
    let disc = Discretization::build(6, 12).unwrap();
    let (sigma_t, sigma_s) = medium(&disc);
    let q1 = angular_source(&disc);
    let bump = AngularField::from_fn(disc.n_cells(), disc.n_ords(), |c, k| ((c * 7 + k * 3) % 4) as f64 * 0.1);
    let q2 = AngularField::from_values(
        disc.n_cells(),
        disc.n_ords(),
        q1.values().iter().zip(bump.values()).map(|(a, b)| a + b).collect(),
    )
    .unwrap();
    let p = TransportProblem::new(sigma_t, sigma_s, ScatteringKernel::HenyeyGreenstein { g: 0.5 });
    let (u1, _) = solve_rte(&disc, &p.clone().with_source(VolumeSource::Angular(q1)), &krylov()).unwrap();
    let (u2, _) = solve_rte(&disc, &p.with_source(VolumeSource::Angular(q2)), &krylov()).unwrap();
    assert!(u1.values().iter().zip(u2.values()).all(|(a, b)| b >= a));
}

#[test]
fn adjoint_sense_flag_and_free_function_agree() {
    let disc = Discretization::build(4, 8).unwrap();
    let (sigma_t, sigma_s) = medium(&disc);
    let p = TransportProblem::new(sigma_t, sigma_s, ScatteringKernel::Isotropic)
        .with_source(VolumeSource::Angular(angular_source(&disc)));
    let (a, _) = solve_adjoint_rte(&disc, &p, &krylov()).unwrap();
    let mut q = p.clone();
    q.sense = Sense::Adjoint;
    let (b, _) = disc.solve(&q, &krylov()).unwrap();
    assert_eq!(a, b);
}
