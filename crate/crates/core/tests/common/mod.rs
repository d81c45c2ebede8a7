//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use qfpat_core::*;

/// Distance from `p` back to the boundary of the square along `-v`.
pub fn backward_distance(p: [f64; 2], v: [f64; 2]) -> f64 {
    let mut t = f64::INFINITY;
    for d in 0..2 {
        if v[d] > 0.0 {
            t = t.min((p[d] + 1.0) / v[d]);
        } else if v[d] < 0.0 {
            t = t.min((1.0 - p[d]) / -v[d]);
        }
    }
    t
}

/// Relative L¹ error (space and angle) of the pure-absorption solution with
/// unit inflow on every side against `exp(-σ_a s)`, `s` the distance
/// travelled inside the square. L¹ because the exact solution has kinks
/// along rays from the corners, which slow the L² rate at moderate
/// resolution.
pub fn ballistic_error(n: usize, n_dirs: usize, sigma_a: f64) -> f64 {
    let disc = Discretization::build(n, n_dirs).unwrap();
    let m = disc.mesh();
    let p = TransportProblem::new(
        ScalarField::constant(m.n_cells(), sigma_a),
        ScalarField::zeros(m.n_cells()),
        ScatteringKernel::Isotropic,
    )
    .with_inflow(BoundarySource::uniform(m, disc.ordinates(), 1.0));
    let (u, _) = solve_rte(&disc, &p, &SolverOptions::default()).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..disc.n_ords() {
        let v = disc.ordinates().direction(k);
        for (c, &x) in m.cell_centroids().iter().enumerate() {
            let exact = (-sigma_a * backward_distance(x, v)).exp();
            let a = m.cell_areas()[c] * disc.ordinates().weights()[k];
            num += a * (u.get(c, k) - exact).abs();
            den += a * exact;
        }
    }
    num / den
}

/// Smooth class-A medium with anisotropic scattering.
pub fn smooth_medium(disc: &Discretization, g: f64) -> OpticalMedium {
    let m = disc.mesh();
    let n = disc.n_cells();
    OpticalMedium {
        sigma_a_xi: m.sample(|x, y| 0.1 + 0.05 * (x * y).cos()),
        sigma_a_m: m.sample(|x, _| 0.15 + 0.05 * x),
        sigma_s_x: m.sample(|_, y| 1.0 + 0.3 * y),
        sigma_s_m: ScalarField::constant(n, 0.8),
        xi: m.sample(|x, _| 1.0 + 0.2 * x),
        kernel: if g == 0.0 { ScatteringKernel::Isotropic } else { ScatteringKernel::HenyeyGreenstein { g } },
        eta: m.sample(|x, y| 0.5 + 0.2 * (2.0 * x + y).sin()),
        sigma_a_xf: m.sample(|x, y| 0.1 + 0.05 * (x + y).cos()),
    }
}

/// Checkerboard medium with the default phantom.
pub fn checkerboard_medium(disc: &Discretization, kernel: ScatteringKernel, base_scattering: f64) -> OpticalMedium {
    let m = disc.mesh();
    let (eta, sigma) = build_phantom_fields(&PhantomSpec::default(), m).unwrap();
    OpticalMedium {
        sigma_a_xi: checkerboard_absorption(m, 0.1),
        sigma_a_m: checkerboard_absorption(m, 0.1),
        sigma_s_x: checkerboard_scattering(m, base_scattering),
        sigma_s_m: checkerboard_scattering(m, base_scattering),
        xi: ScalarField::constant(disc.n_cells(), 1.0),
        kernel,
        eta,
        sigma_a_xf: sigma,
    }
}

pub fn side_sources(disc: &Discretization) -> Vec<BoundarySource> {
    Side::ALL.iter().map(|&s| BoundarySource::side(disc.mesh(), disc.ordinates(), s, 1.0)).collect()
}

/// Deterministic smooth field with a random phase, for randomized tests.
pub fn wave(disc: &Discretization, seed: u64, base: f64, amp: f64) -> ScalarField {
    let a = 1.0 + (seed % 5) as f64 * 0.7;
    let b = 0.5 + (seed % 3) as f64 * 0.9;
    let ph = seed as f64 * 1.3;
    disc.mesh().sample(|x, y| base + amp * (a * x + ph).sin() * (b * y - 0.5 * ph).cos())
}
