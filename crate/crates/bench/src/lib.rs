//! Shared fixtures for the benchmarks: the checkerboard medium
//! with the default phantom, four side sources and anisotropic scattering.

use qfpat_core::*;

pub struct Fixture {
    pub disc: Discretization,
    pub medium: OpticalMedium,
    pub sources: Vec<BoundarySource>,
}

impl Fixture {
    pub fn new(n_per_side: usize, n_dirs: usize) -> Self {
        let disc = Discretization::build(n_per_side, n_dirs).expect("valid discretization");
        let m = disc.mesh();
        let (eta, sigma) = build_phantom_fields(&PhantomSpec::default(), m).expect("default phantom");
        let medium = OpticalMedium {
            sigma_a_xi: checkerboard_absorption(m, 0.1),
            sigma_a_m: checkerboard_absorption(m, 0.1),
            sigma_s_x: checkerboard_scattering(m, 1.0),
            sigma_s_m: checkerboard_scattering(m, 1.0),
            xi: ScalarField::constant(disc.n_cells(), 1.0),
            kernel: ScatteringKernel::HenyeyGreenstein { g: 0.5 },
            eta,
            sigma_a_xf: sigma,
        };
        let sources = Side::ALL.iter().map(|&s| BoundarySource::side(m, disc.ordinates(), s, 1.0)).collect();
        Self { disc, medium, sources }
    }

    /// Excitation problem with the first side source.
    pub fn excitation(&self) -> TransportProblem {
        TransportProblem::new(self.medium.sigma_t_x(), self.medium.sigma_s_x.clone(), self.medium.kernel)
            .with_inflow(self.sources[0].clone())
    }

    /// Block operator linearized around the phantom means.
    pub fn block_operator(&self, opts: SolverOptions) -> BlockOperator<'_> {
        let m = self.disc.mesh();
        let n = self.disc.n_cells();
        let background = self
            .medium
            .clone()
            .with_eta(ScalarField::constant(n, self.medium.eta.mean(m)))
            .with_sigma_a_xf(ScalarField::constant(n, self.medium.sigma_a_xf.mean(m)));
        BlockOperator::from_sources(&self.disc, &background, LinearModel::General, &self.sources, 0.0, opts)
            .expect("admissible background")
    }

    /// A smooth coefficient perturbation for operator applications.
    pub fn perturbation(&self) -> CoefficientPair {
        let m = self.disc.mesh();
        CoefficientPair {
            zeta: m.sample(|x, y| 0.1 * (2.0 * x).sin() * (3.0 * y).cos()),
            xi: m.sample(|x, y| 0.05 * (x * y).cos()),
        }
    }
}
