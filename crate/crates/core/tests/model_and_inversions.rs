//! Forward model, linearization and reconstruction checks that need more
//! than one module.

use qfpat_core::grid::norm_omega;
use qfpat_core::varrecon::objective_gradient;
use qfpat_core::*;

mod common;
use common::{checkerboard_medium, side_sources, smooth_medium, wave};

fn opts() -> SolverOptions {
    SolverOptions::krylov(1e-12)
}

// Reference run: 8×8 mesh, 16 ordinates, `smooth_medium` with g = 0.5 and
// uniform unit inflow.
const PINNED_UM_OVER_G: f64 = 0.103775480567;
const PINNED_UX_OVER_G: f64 = 0.971714035231;

#[test]
fn forward_bound_constant_is_pinned() {
    let disc = Discretization::build(8, 16).unwrap();
    let med = smooth_medium(&disc, 0.5);
    for scale in [1.0, 2.5] {
        let g = BoundarySource::uniform(disc.mesh(), disc.ordinates(), scale);
        let fs = solve_forward(&disc, &med, &g, &opts()).unwrap();
        let (cm, cx) = (fs.u_m.max_abs() / g.max_abs(), fs.u_x.max_abs() / g.max_abs());
        assert!((cm - PINNED_UM_OVER_G).abs() < 1e-9, "{cm}");
        assert!((cx - PINNED_UX_OVER_G).abs() < 1e-9, "{cx}");
    }
}

// Reference bracket for `‖(η - η̃) σ_a,xf K_I u_x‖ / ‖H - H̃‖` on the same
// configuration, eight randomized pairs: observed [1.003, 1.110].
const BRACKET: (f64, f64) = (0.95, 1.2);

#[test]
fn eta_stability_ratio_stays_in_pinned_bracket() {
    let disc = Discretization::build(8, 16).unwrap();
    let m = disc.mesh();
    let med = smooth_medium(&disc, 0.5);
    let g = BoundarySource::uniform(m, disc.ordinates(), 1.0);
    for seed in 0..8u64 {
        let (e1, e2) = (wave(&disc, seed, 0.5, 0.3), wave(&disc, seed + 11, 0.5, 0.3));
        let (m1, m2) = (med.clone().with_eta(e1.clone()), med.clone().with_eta(e2.clone()));
        let f1 = solve_forward(&disc, &m1, &g, &opts()).unwrap();
        let f2 = solve_forward(&disc, &m2, &g, &opts()).unwrap();
        let dh = compute_datum(&m1, &f1).sub(&compute_datum(&m2, &f2));
        let num = e1.sub(&e2).mul(&med.sigma_a_xf).mul(&f1.k_i_ux);
        let r = norm_omega(m, &num) / norm_omega(m, &dh);
        assert!(r >= BRACKET.0 && r <= BRACKET.1, "seed {seed}: {r}");
        // The reconstruction difference obeys the same bracket.
        let r1 = reconstruct_eta_direct(&disc, &med, &g, &compute_datum(&m1, &f1), &opts()).unwrap();
        let r2 = reconstruct_eta_direct(&disc, &med, &g, &compute_datum(&m2, &f2), &opts()).unwrap();
        let rec = r1.field.sub(&r2.field).mul(&med.sigma_a_xf).mul(&f1.k_i_ux);
        assert!((norm_omega(m, &rec) - norm_omega(m, &num)).abs() < 1e-8 * norm_omega(m, &num));
    }
}

fn taylor_remainders(disc: &Discretization, hs: &[f64]) -> Vec<f64> {
    let med = smooth_medium(disc, 0.5);
    let g = BoundarySource::uniform(disc.mesh(), disc.ordinates(), 1.0);
    let o = SolverOptions::krylov(1e-14);
    let de = wave(disc, 3, 0.0, 0.2);
    let ds = wave(disc, 5, 0.0, 0.05);
    let fs = solve_forward(disc, &med, &g, &o).unwrap();
    let h0 = compute_datum(&med, &fs);
    let (vx, vm) = solve_linearized(disc, &med, &fs, &de, &ds, &o).unwrap();
    let dh = compute_linearized_datum(disc, &med, &fs, &de, &ds, &vx, &vm);
    hs.iter()
        .map(|&h| {
            let mh = med.clone().with_eta(med.eta.add(&de.scale(h))).with_sigma_a_xf(med.sigma_a_xf.add(&ds.scale(h)));
            let hh = compute_datum(&mh, &solve_forward(disc, &mh, &g, &o).unwrap());
            norm_omega(disc.mesh(), &hh.sub(&h0).sub(&dh.scale(h)))
        })
        .collect()
}

/// Least-squares slope of `log r` against `log h`.
fn loglog_slope(hs: &[f64], rs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = rs.iter().map(|r| r.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn taylor_remainder_is_second_order() {
    let disc = Discretization::build(8, 16).unwrap();
    let hs = [1e-1, 1e-2, 1e-3, 1e-4];
    let rs = taylor_remainders(&disc, &hs);
    let slope = loglog_slope(&hs, &rs);
    assert!((slope - 2.0).abs() < 0.2, "slope {slope}, remainders {rs:?}");
}

/// `Σ_faces L (f_c - f_n)² / ‖f‖²`: jump-based roughness, large for
/// oscillating fields.
fn roughness(mesh: &Mesh, f: &ScalarField) -> f64 {
    let v = f.values();
    let mut jumps = 0.0;
    for c in 0..mesh.n_cells() {
        for face in mesh.faces(c) {
            if let grid::FaceNeighbor::Cell(nb) = face.neighbor {
                jumps += 0.5 * face.length * (v[c] - v[nb]).powi(2);
            }
        }
    }
    jumps / norm_omega(mesh, f).powi(2)
}

#[test]
fn lambda_x_smooths_high_frequency_input() {
    let disc = Discretization::build(16, 16).unwrap();
    let m = disc.mesh();
    let med = smooth_medium(&disc, 0.5);
    let op = BlockOperator::from_sources(&disc, &med, LinearModel::General, &side_sources(&disc), 0.0, opts()).unwrap();
    for freq in [4.0, 8.0] {
        let f = m.sample(|x, y| if ((freq * x).floor() + (freq * y).floor()) as i64 % 2 == 0 { 1.0 } else { -1.0 });
        for j in 0..4 {
            let out = op.apply_lambda_x(&f, j).unwrap();
            let ratio = roughness(m, &out) / roughness(m, &f);
            assert!(ratio < 1.0, "frequency {freq}, source {j}: {ratio}");
        }
    }
}

#[test]
fn sigma_gradient_matches_direct_assembly_of_its_bracket() {
    let disc = Discretization::build(6, 12).unwrap();
    let m = disc.mesh();
    let n = disc.n_cells();
    let med = smooth_medium(&disc, 0.5);
    let g = BoundarySource::uniform(m, disc.ordinates(), 1.0);
    let fs = solve_forward(&disc, &med, &g, &opts()).unwrap();
    // Data below the model everywhere, so the residual z is positive.
    let h_model = compute_datum(&med, &fs);
    let z = m.sample(|x, y| 0.01 * (1.5 + x * y));
    let data = h_model.sub(&z);
    let mut spec = ObjectiveSpec::new(&disc, med.clone(), vec![g], vec![data], Unknowns::Both);
    spec.opts = opts();
    let ev = objective_gradient(&spec, &med.eta, &med.sigma_a_xf).unwrap();

    // Adjoint pair assembled here from the transport primitives.
    let emission = TransportProblem::new(med.sigma_t_m(), med.sigma_s_m.clone(), med.kernel)
        .with_source(VolumeSource::Isotropic(med.xi.mul(&med.sigma_a_m).mul(&z)));
    let (q_m, _) = solve_adjoint_rte(&disc, &emission, &opts()).unwrap();
    let kq_m = apply_k_i(disc.ordinates(), &q_m).unwrap();
    let src_x = med.xi.mul(&med.sigma_a_x_eta()).mul(&z).add(&med.eta.mul(&med.sigma_a_xf).mul(&kq_m));
    let excitation = TransportProblem::new(med.sigma_t_x(), med.sigma_s_x.clone(), med.kernel)
        .with_source(VolumeSource::Isotropic(src_x));
    let (q_x, _) = solve_adjoint_rte(&disc, &excitation, &opts()).unwrap();
    let k_qu = apply_k_i(disc.ordinates(), &q_x.mul_angular(&fs.u_x)).unwrap();
    for c in 0..n {
        let (eta, xi, phi) = (med.eta.values()[c], med.xi.values()[c], fs.k_i_ux.values()[c]);
        let bracket = xi * (1.0 - eta) * z.values()[c] * phi + eta * phi * kq_m.values()[c] - k_qu.values()[c];
        let got = ev.grad_sigma.values()[c];
        assert!((got - bracket).abs() < 1e-9 * bracket.abs().max(1e-6), "cell {c}: {got} vs {bracket}");
        let eta_bracket = med.sigma_a_xf.values()[c] * phi * (-xi * z.values()[c] + kq_m.values()[c]);
        assert!((ev.grad_eta.values()[c] - eta_bracket).abs() < 1e-9 * eta_bracket.abs().max(1e-6));
    }

    // A single-cell bump: the directional derivative has the bracket's sign.
    let cell = n / 2 + 3;
    let bump = ScalarField::new((0..n).map(|c| if c == cell { 1.0 } else { 0.0 }).collect());
    let h = 1e-6;
    let phi_at = |s: &ScalarField| objective_value(&spec, &med.eta, s).unwrap();
    let fd = (phi_at(&med.sigma_a_xf.add(&bump.scale(h))) - phi_at(&med.sigma_a_xf.sub(&bump.scale(h)))) / (2.0 * h);
    let an = ev.grad_sigma.values()[cell] * m.cell_areas()[cell];
    assert_eq!(fd.signum(), an.signum());
    assert!((fd - an).abs() < 1e-4 * an.abs(), "{fd} vs {an}");
}

#[test]
fn eta_gradient_matches_central_difference_on_16_mesh() {
    let disc = Discretization::build(16, 16).unwrap();
    let med = checkerboard_medium(&disc, ScatteringKernel::HenyeyGreenstein { g: 0.5 }, 1.0);
    let src = side_sources(&disc);
    let data: Vec<_> =
        src.iter().map(|g| compute_datum(&med, &solve_forward(&disc, &med, g, &opts()).unwrap())).collect();
    let mut spec = ObjectiveSpec::new(&disc, med.clone(), src, data, Unknowns::Both);
    spec.opts = opts();
    let eta = wave(&disc, 2, 0.55, 0.2);
    let sigma = wave(&disc, 4, 0.15, 0.05);
    let de = wave(&disc, 7, 0.0, 1.0);
    let ev = objective_gradient(&spec, &eta, &sigma).unwrap();
    let h = 1e-5;
    let fd = (objective_value(&spec, &eta.add(&de.scale(h)), &sigma).unwrap()
        - objective_value(&spec, &eta.sub(&de.scale(h)), &sigma).unwrap())
        / (2.0 * h);
    let an = grid::inner_omega(disc.mesh(), &ev.grad_eta, &de);
    assert!((fd - an).abs() < 1e-4 * an.abs(), "{fd} vs {an}");
}

#[test]
fn sigma_only_nonlinear_recovers_noise_free_truth() {
    let mut cfg = RunConfig::default();
    cfg.mesh.n_per_side = 12;
    cfg.ordinates.count = 16;
    cfg.nonlinear.unknowns = Unknowns::Sigma;
    cfg.nonlinear.beta = Some(0.0);
    let report = run_single(&cfg, Operation::Nonlinear).unwrap();
    let e = report.runs[0].metrics.sigma_error.unwrap();
    assert!(e < 1.0, "sigma error {e}%");
}

#[test]
fn regularization_never_lowers_the_final_objective() {
    let disc = Discretization::build(8, 16).unwrap();
    let med = checkerboard_medium(&disc, ScatteringKernel::HenyeyGreenstein { g: 0.5 }, 1.0);
    let src = side_sources(&disc);
    let data: Vec<_> =
        src.iter().map(|g| compute_datum(&med, &solve_forward(&disc, &med, g, &opts()).unwrap())).collect();
    let n = disc.n_cells();
    let e0 = ScalarField::constant(n, med.eta.mean(disc.mesh()));
    let s0 = ScalarField::constant(n, med.sigma_a_xf.mean(disc.mesh()));
    let o = MinimizeOptions { max_iters: 150, ..Default::default() };
    let run = |beta: f64| {
        let mut spec = ObjectiveSpec::new(&disc, med.clone(), src.clone(), data.clone(), Unknowns::Both);
        spec.opts = opts();
        spec.beta = beta;
        minimize(&spec, &e0, &s0, &o).unwrap()
    };
    let free = run(0.0);
    let reg = run(1e-7);
    assert!(free.objective <= reg.objective, "{} > {}", free.objective, reg.objective);
    assert!(free.objective < 1e-3 * free.history.steps[0].objective);
    assert!(reg.objective < 1e-2 * reg.history.steps[0].objective);
}
