//! Coupled excitation/emission transport, the photoacoustic datum and its
//! linearization.

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::grid::{AngularField, BoundarySource, ScalarField};
use crate::rte::{Discretization, ScatteringKernel, SolveReport, SolverOptions, TransportProblem, VolumeSource};

/// Optical and photoacoustic coefficients. `eta` and `sigma_a_xf` are the
/// quantities reconstructed; the rest is assumed known.
#[derive(Debug, Clone)]
pub struct OpticalMedium {
    pub sigma_a_xi: ScalarField,
    pub sigma_a_m: ScalarField,
    pub sigma_s_x: ScalarField,
    pub sigma_s_m: ScalarField,
    pub xi: ScalarField,
    pub kernel: ScatteringKernel,
    pub eta: ScalarField,
    pub sigma_a_xf: ScalarField,
}

impl OpticalMedium {
    pub fn n_cells(&self) -> usize {
        self.xi.len()
    }

    pub fn with_eta(mut self, eta: ScalarField) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_sigma_a_xf(mut self, sigma: ScalarField) -> Self {
        self.sigma_a_xf = sigma;
        self
    }

    /// `σ_a,x = σ_a,xi + σ_a,xf`.
    pub fn sigma_a_x(&self) -> ScalarField {
        self.sigma_a_xi.add(&self.sigma_a_xf)
    }

    /// `σ_a,x^η = σ_a,xi + (1-η) σ_a,xf`: the part of excitation absorption
    /// that heats.
    pub fn sigma_a_x_eta(&self) -> ScalarField {
        let mut out = self.sigma_a_xi.clone();
        for ((o, e), s) in out.values_mut().iter_mut().zip(self.eta.values()).zip(self.sigma_a_xf.values()) {
            *o += (1.0 - e) * s;
        }
        out
    }

    pub fn sigma_t_x(&self) -> ScalarField {
        self.sigma_a_x().add(&self.sigma_s_x)
    }

    pub fn sigma_t_m(&self) -> ScalarField {
        self.sigma_a_m.add(&self.sigma_s_m)
    }

    fn check_shapes(&self, n: usize) -> Result<()> {
        check_len("sigma_a_xi", n, self.sigma_a_xi.len())?;
        check_len("sigma_a_m", n, self.sigma_a_m.len())?;
        check_len("sigma_s_x", n, self.sigma_s_x.len())?;
        check_len("sigma_s_m", n, self.sigma_s_m.len())?;
        check_len("xi", n, self.xi.len())?;
        check_len("eta", n, self.eta.len())?;
        check_len("sigma_a_xf", n, self.sigma_a_xf.len())
    }

    /// Known coefficients finite and strictly positive. Scattering may
    /// vanish (scattering-free excitation).
    pub fn validate_known(&self, n_cells: usize) -> Result<()> {
        self.check_shapes(n_cells)?;
        let positive = [("sigma_a_xi", &self.sigma_a_xi), ("sigma_a_m", &self.sigma_a_m), ("xi", &self.xi)];
        for (name, f) in positive {
            if let Some(c) = f.values().iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::CoefficientBounds(format!("{name} must be positive, got {} in cell {c}", f.values()[c])));
            }
        }
        for (name, f) in [("sigma_s_x", &self.sigma_s_x), ("sigma_s_m", &self.sigma_s_m)] {
            if let Some(c) = f.values().iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::CoefficientBounds(format!("{name} must be nonnegative, got {} in cell {c}", f.values()[c])));
            }
        }
        Ok(())
    }

    /// Admissible for the forward model: `0 <= η < 1`, `σ_a,xf >= 0`.
    /// Includes the zero background.
    pub fn validate_admissible(&self, n_cells: usize) -> Result<()> {
        self.validate_known(n_cells)?;
        if let Some(c) = self.eta.values().iter().position(|&v| !(0.0..1.0).contains(&v)) {
            return Err(Error::CoefficientBounds(format!("eta must lie in [0,1), got {} in cell {c}", self.eta.values()[c])));
        }
        if let Some(c) = self.sigma_a_xf.values().iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::CoefficientBounds(format!(
                "sigma_a_xf must be nonnegative, got {} in cell {c}",
                self.sigma_a_xf.values()[c]
            )));
        }
        Ok(())
    }

    /// Class A: `0 < η < 1` and `σ_a,xf > 0` in addition to the known bounds.
    pub fn validate_class_a(&self, n_cells: usize) -> Result<()> {
        self.validate_admissible(n_cells)?;
        if let Some(c) = self.eta.values().iter().position(|&v| v <= 0.0) {
            return Err(Error::CoefficientBounds(format!("eta must be positive in class A (cell {c})")));
        }
        if let Some(c) = self.sigma_a_xf.values().iter().position(|&v| v <= 0.0) {
            return Err(Error::CoefficientBounds(format!("sigma_a_xf must be positive in class A (cell {c})")));
        }
        Ok(())
    }

    pub(crate) fn excitation_problem(&self) -> TransportProblem {
        TransportProblem::new(self.sigma_t_x(), self.sigma_s_x.clone(), self.kernel)
    }

    pub(crate) fn emission_problem(&self) -> TransportProblem {
        TransportProblem::new(self.sigma_t_m(), self.sigma_s_m.clone(), self.kernel)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub u_x: AngularField,
    pub u_m: AngularField,
    pub k_i_ux: ScalarField,
    pub k_i_um: ScalarField,
    pub report_x: SolveReport,
    pub report_m: SolveReport,
}

impl ForwardSolution {
    /// Copy with `u_x` replaced by its angular average at every ordinate, so
    /// that `u_x = K_I(u_x)` holds exactly.
    pub fn isotropized(&self, disc: &Discretization) -> Self {
        Self {
            u_x: disc.replicate(&self.k_i_ux),
            ..self.clone()
        }
    }

    /// Largest cellwise relative deviation `|u_x - K_I u_x| / K_I u_x`.
    pub fn anisotropy(&self) -> f64 {
        let n = self.k_i_ux.len();
        let mut worst = 0.0_f64;
        for k in 0..self.u_x.n_ords() {
            for (c, &u) in self.u_x.ordinate(k).iter().enumerate().take(n) {
                let avg = self.k_i_ux.values()[c];
                let dev = (u - avg).abs() / avg.abs().max(f64::MIN_POSITIVE);
                worst = worst.max(dev);
            }
        }
        worst
    }
}

fn check_boundary(disc: &Discretization, g: &BoundarySource) -> Result<()> {
    check_len("boundary source edges", disc.mesh().n_boundary_edges(), g.n_edges())?;
    check_len("boundary source ordinates", disc.n_ords(), g.n_ords())?;
    if !g.is_nonnegative() {
        return Err(Error::InvalidArgument("excitation boundary source must be nonnegative".into()));
    }
    Ok(())
}

/// Excitation solve followed by the emission solve it drives.
pub fn solve_forward(
    disc: &Discretization,
    medium: &OpticalMedium,
    g_x: &BoundarySource,
    opts: &SolverOptions,
) -> Result<ForwardSolution> {
    medium.validate_admissible(disc.n_cells())?;
    check_boundary(disc, g_x)?;
    let (u_x, report_x) = disc.solve(&medium.excitation_problem().with_inflow(g_x.clone()), opts)?;
    report_x.ensure("excitation transport")?;
    let k_i_ux = disc.k_i(&u_x);
    let source = medium.eta.mul(&medium.sigma_a_xf).mul(&k_i_ux);
    let (u_m, report_m) = disc.solve(&medium.emission_problem().with_source(VolumeSource::Isotropic(source)), opts)?;
    report_m.ensure("emission transport")?;
    let k_i_um = disc.k_i(&u_m);
    Ok(ForwardSolution {
        u_x,
        u_m,
        k_i_ux,
        k_i_um,
        report_x,
        report_m,
    })
}

/// [`solve_forward`] over several illuminations, in parallel.
pub fn solve_forward_many(
    disc: &Discretization,
    medium: &OpticalMedium,
    sources: &[BoundarySource],
    opts: &SolverOptions,
) -> Result<Vec<ForwardSolution>> {
    sources.par_iter().map(|g| solve_forward(disc, medium, g, opts)).collect()
}

/// `H = Ξ (σ_a,x^η K_I u_x + σ_a,m K_I u_m)`.
pub fn compute_datum(medium: &OpticalMedium, fs: &ForwardSolution) -> ScalarField {
    let heat_x = medium.sigma_a_x_eta().mul(&fs.k_i_ux);
    let heat_m = medium.sigma_a_m.mul(&fs.k_i_um);
    medium.xi.mul(&heat_x.add(&heat_m))
}

/// Linearized fields in direction `(δη, δσ)` around the background `fs`.
pub fn solve_linearized(
    disc: &Discretization,
    medium: &OpticalMedium,
    fs: &ForwardSolution,
    d_eta: &ScalarField,
    d_sigma: &ScalarField,
    opts: &SolverOptions,
) -> Result<(AngularField, AngularField)> {
    let n = disc.n_cells();
    check_len("d_eta", n, d_eta.len())?;
    check_len("d_sigma", n, d_sigma.len())?;
    medium.validate_admissible(n)?;
    let src_x = fs.u_x.mul_scalar_field(&d_sigma.scale(-1.0));
    let (v_x, rx) = disc.solve(&medium.excitation_problem().with_source(VolumeSource::Angular(src_x)), opts)?;
    rx.ensure("linearized excitation transport")?;
    let k_i_vx = disc.k_i(&v_x);
    let eta = &medium.eta;
    let sigma = &medium.sigma_a_xf;
    let mut src_m = eta.mul(sigma).mul(&k_i_vx);
    for c in 0..n {
        let e = eta.values()[c];
        let s = sigma.values()[c];
        src_m.values_mut()[c] += (e * d_sigma.values()[c] + d_eta.values()[c] * s) * fs.k_i_ux.values()[c];
    }
    let (v_m, rm) = disc.solve(&medium.emission_problem().with_source(VolumeSource::Isotropic(src_m)), opts)?;
    rm.ensure("linearized emission transport")?;
    Ok((v_x, v_m))
}

/// `H' = Ξ((-δη σ_a,xf + (1-η) δσ) K_I u_x + σ_a,x^η K_I v_x + σ_a,m K_I v_m)`.
pub fn compute_linearized_datum(
    disc: &Discretization,
    medium: &OpticalMedium,
    fs: &ForwardSolution,
    d_eta: &ScalarField,
    d_sigma: &ScalarField,
    v_x: &AngularField,
    v_m: &AngularField,
) -> ScalarField {
    let k_i_vx = disc.k_i(v_x);
    let k_i_vm = disc.k_i(v_m);
    let s_eta = medium.sigma_a_x_eta();
    let n = medium.n_cells();
    let out = (0..n)
        .map(|c| {
            let e = medium.eta.values()[c];
            let s = medium.sigma_a_xf.values()[c];
            let direct = (-d_eta.values()[c] * s + (1.0 - e) * d_sigma.values()[c]) * fs.k_i_ux.values()[c];
            medium.xi.values()[c]
                * (direct + s_eta.values()[c] * k_i_vx.values()[c] + medium.sigma_a_m.values()[c] * k_i_vm.values()[c])
        })
        .collect();
    ScalarField::new(out)
}
