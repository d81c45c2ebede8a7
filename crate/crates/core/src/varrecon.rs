//! Nonlinear least-squares reconstruction of `(η, σ_a,xf)` with
//! adjoint-state gradients and projected L-BFGS.
//!
//! ```text
//! Φ(η, σ) = ½ Σ_j ∫ z_j² + β R(η, σ),   z_j = H[η, σ; g_j] - H_j
//! ```
//!
//! For each source the adjoint pair is solved emission first:
//!
//! ```text
//! -v·∇q_m + σ_t,m q_m = σ_s,m K_Θ q_m + Ξ σ_a,m z
//! -v·∇q_x + σ_t,x q_x = σ_s,x K_Θ q_x + Ξ σ_a,x^η z + η σ_a,xf K_I q_m
//! ```
//!
//! and the L²(Ω) gradients are
//!
//! ```text
//! g_η = Σ_j σ_a,xf K_I u_x (-Ξ z + K_I q_m)
//! g_σ = Σ_j Ξ (1-η) z K_I u_x + η K_I u_x K_I q_m - K_I(u_x q_x)
//! ```

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::fpat::{compute_datum, solve_forward, OpticalMedium};
use crate::grid::{inner_omega, BoundarySource, Mesh, ScalarField};
use crate::phantoms::{ETA_BOUNDS, SIGMA_BOUNDS};
use crate::rte::{Discretization, SolverOptions, VolumeSource};

/// `R(f) = ½ Σ_T |T| |∇(P f)|²`, where `P` lifts cell values to vertices by
/// area-weighted averaging and the gradient is that of the P1 interpolant.
#[derive(Debug, Clone)]
pub struct GradientRegularizer {
    /// Per vertex: (cell, weight) with weights summing to one.
    lift: Vec<Vec<(usize, f64)>>,
    /// Per cell: the three vertex indices and `∇λ_i`.
    grads: Vec<[(usize, [f64; 2]); 3]>,
    areas: Vec<f64>,
}

impl GradientRegularizer {
    pub fn new(mesh: &Mesh) -> Self {
        let areas = mesh.cell_areas().to_vec();
        let mut lift: Vec<Vec<(usize, f64)>> = vec![Vec::new(); mesh.n_vertices()];
        for (c, tri) in mesh.cells().iter().enumerate() {
            for &v in tri {
                lift[v].push((c, areas[c]));
            }
        }
        for entries in &mut lift {
            let total: f64 = entries.iter().map(|e| e.1).sum();
            entries.iter_mut().for_each(|e| e.1 /= total);
        }
        let verts = mesh.vertices();
        let grads = mesh
            .cells()
            .iter()
            .zip(&areas)
            .map(|(tri, &a)| {
                let g = |i: usize| {
                    // ∇λ_i is the inward normal of the opposite edge over its height.
                    let p = verts[tri[(i + 1) % 3]];
                    let q = verts[tri[(i + 2) % 3]];
                    [(p[1] - q[1]) / (2.0 * a), (q[0] - p[0]) / (2.0 * a)]
                };
                [(tri[0], g(0)), (tri[1], g(1)), (tri[2], g(2))]
            })
            .collect();
        Self { lift, grads, areas }
    }

    fn vertex_values(&self, f: &[f64]) -> Vec<f64> {
        self.lift.iter().map(|e| e.iter().map(|&(c, w)| w * f[c]).sum()).collect()
    }

    fn cell_gradients(&self, f: &[f64]) -> Vec<[f64; 2]> {
        let pv = self.vertex_values(f);
        self.grads
            .iter()
            .map(|g| {
                let mut out = [0.0; 2];
                for &(v, d) in g {
                    out[0] += pv[v] * d[0];
                    out[1] += pv[v] * d[1];
                }
                out
            })
            .collect()
    }

    pub fn value(&self, f: &ScalarField) -> f64 {
        self.cell_gradients(f.values())
            .iter()
            .zip(&self.areas)
            .map(|(g, a)| 0.5 * a * (g[0] * g[0] + g[1] * g[1]))
            .sum()
    }

    /// L²(Ω) Riesz representative of the derivative of [`Self::value`].
    pub fn gradient(&self, f: &ScalarField) -> ScalarField {
        let cg = self.cell_gradients(f.values());
        let mut dv = vec![0.0; self.lift.len()];
        for ((g, a), grads) in cg.iter().zip(&self.areas).zip(&self.grads) {
            for &(v, d) in grads {
                dv[v] += a * (g[0] * d[0] + g[1] * d[1]);
            }
        }
        let mut out = vec![0.0; self.areas.len()];
        for (v, entries) in self.lift.iter().enumerate() {
            for &(c, w) in entries {
                out[c] += w * dv[v];
            }
        }
        ScalarField::new(out.iter().zip(&self.areas).map(|(g, a)| g / a).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unknowns {
    Eta,
    Sigma,
    Both,
}

impl Unknowns {
    fn eta(self) -> bool {
        matches!(self, Unknowns::Eta | Unknowns::Both)
    }

    fn sigma(self) -> bool {
        matches!(self, Unknowns::Sigma | Unknowns::Both)
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveSpec<'a> {
    pub disc: &'a Discretization,
    /// Known coefficients. Its `eta` and `sigma_a_xf` supply the frozen
    /// field in single-coefficient modes.
    pub medium: OpticalMedium,
    pub sources: Vec<BoundarySource>,
    pub data: Vec<ScalarField>,
    pub beta: f64,
    pub unknowns: Unknowns,
    pub eta_bounds: (f64, f64),
    pub sigma_bounds: (f64, f64),
    pub opts: SolverOptions,
}

impl<'a> ObjectiveSpec<'a> {
    pub fn new(
        disc: &'a Discretization,
        medium: OpticalMedium,
        sources: Vec<BoundarySource>,
        data: Vec<ScalarField>,
        unknowns: Unknowns,
    ) -> Self {
        Self {
            disc,
            medium,
            sources,
            data,
            beta: 0.0,
            unknowns,
            eta_bounds: ETA_BOUNDS,
            sigma_bounds: SIGMA_BOUNDS,
            opts: SolverOptions::krylov(1e-10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.disc.n_cells();
        if self.sources.is_empty() || self.sources.len() != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "need one datum per source, got {} sources and {} data",
                self.sources.len(),
                self.data.len()
            )));
        }
        for h in &self.data {
            check_len("datum", n, h.len())?;
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {}", self.beta)));
        }
        for (name, (lo, hi)) in [("eta", self.eta_bounds), ("sigma", self.sigma_bounds)] {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("empty {name} bounds [{lo}, {hi}]")));
            }
        }
        if !(self.eta_bounds.0 >= 0.0 && self.eta_bounds.1 < 1.0 && self.sigma_bounds.0 >= 0.0) {
            return Err(Error::InvalidArgument("bounds must lie in the admissible set".into()));
        }
        self.medium.validate_known(n)?;
        self.opts.validate()
    }

    fn within_bounds(&self, eta: &ScalarField, sigma: &ScalarField) -> Result<()> {
        let inside = |f: &ScalarField, (lo, hi): (f64, f64)| f.values().iter().all(|&v| v >= lo && v <= hi);
        if !inside(eta, self.eta_bounds) || !inside(sigma, self.sigma_bounds) {
            return Err(Error::CoefficientBounds("iterate outside the admissible box".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub misfit: f64,
    pub regularization: f64,
    pub grad_eta: ScalarField,
    pub grad_sigma: ScalarField,
}

struct SourceTerms {
    misfit: f64,
    g_eta: Vec<f64>,
    g_sigma: Vec<f64>,
}

fn source_terms(spec: &ObjectiveSpec<'_>, medium: &OpticalMedium, j: usize, with_gradient: bool) -> Result<SourceTerms> {
    let disc = spec.disc;
    let mesh = disc.mesh();
    let n = disc.n_cells();
    let fs = solve_forward(disc, medium, &spec.sources[j], &spec.opts)?;
    let z = compute_datum(medium, &fs).sub(&spec.data[j]);
    let misfit = 0.5 * inner_omega(mesh, &z, &z);
    if !with_gradient {
        return Ok(SourceTerms {
            misfit,
            g_eta: Vec::new(),
            g_sigma: Vec::new(),
        });
    }

    let xi = medium.xi.values();
    let src_m = ScalarField::new((0..n).map(|c| xi[c] * medium.sigma_a_m.values()[c] * z.values()[c]).collect());
    let (q_m, rm) = disc.solve(&medium.emission_problem().with_source(VolumeSource::Isotropic(src_m)).adjoint(), &spec.opts)?;
    rm.ensure("adjoint emission transport")?;
    let kq_m = disc.k_i(&q_m);
    let s_eta = medium.sigma_a_x_eta();
    let (eta, sigma) = (medium.eta.values(), medium.sigma_a_xf.values());
    let src_x = ScalarField::new(
        (0..n)
            .map(|c| xi[c] * s_eta.values()[c] * z.values()[c] + eta[c] * sigma[c] * kq_m.values()[c])
            .collect(),
    );
    let (q_x, rx) = disc.solve(&medium.excitation_problem().with_source(VolumeSource::Isotropic(src_x)).adjoint(), &spec.opts)?;
    rx.ensure("adjoint excitation transport")?;
    let k_uq = disc.k_i(&q_x.mul_angular(&fs.u_x));

    let phi = fs.k_i_ux.values();
    let zv = z.values();
    let g_eta = (0..n).map(|c| sigma[c] * phi[c] * (-xi[c] * zv[c] + kq_m.values()[c])).collect();
    let g_sigma = (0..n)
        .map(|c| xi[c] * (1.0 - eta[c]) * zv[c] * phi[c] + eta[c] * phi[c] * kq_m.values()[c] - k_uq.values()[c])
        .collect();
    Ok(SourceTerms { misfit, g_eta, g_sigma })
}

fn evaluate_impl(
    spec: &ObjectiveSpec<'_>,
    reg: &GradientRegularizer,
    eta: &ScalarField,
    sigma: &ScalarField,
    with_gradient: bool,
) -> Result<Evaluation> {
    let n = spec.disc.n_cells();
    check_len("eta", n, eta.len())?;
    check_len("sigma", n, sigma.len())?;
    spec.within_bounds(eta, sigma)?;
    let medium = spec.medium.clone().with_eta(eta.clone()).with_sigma_a_xf(sigma.clone());
    let terms = (0..spec.sources.len())
        .into_par_iter()
        .map(|j| source_terms(spec, &medium, j, with_gradient))
        .collect::<Result<Vec<_>>>()?;
    let misfit: f64 = terms.iter().map(|t| t.misfit).sum();
    let regularization = spec.beta * (reg.value(eta) + reg.value(sigma));
    let mut g_eta = vec![0.0; if with_gradient { n } else { 0 }];
    let mut g_sigma = g_eta.clone();
    if with_gradient {
        for t in &terms {
            g_eta.iter_mut().zip(&t.g_eta).for_each(|(a, b)| *a += b);
            g_sigma.iter_mut().zip(&t.g_sigma).for_each(|(a, b)| *a += b);
        }
        if spec.beta > 0.0 {
            let re = reg.gradient(eta);
            let rs = reg.gradient(sigma);
            g_eta.iter_mut().zip(re.values()).for_each(|(a, b)| *a += spec.beta * b);
            g_sigma.iter_mut().zip(rs.values()).for_each(|(a, b)| *a += spec.beta * b);
        }
        if !spec.unknowns.eta() {
            g_eta.iter_mut().for_each(|g| *g = 0.0);
        }
        if !spec.unknowns.sigma() {
            g_sigma.iter_mut().for_each(|g| *g = 0.0);
        }
    }
    Ok(Evaluation {
        value: misfit + regularization,
        misfit,
        regularization,
        grad_eta: ScalarField::new(g_eta),
        grad_sigma: ScalarField::new(g_sigma),
    })
}

/// `Φ(η, σ)` with `R(η, σ) = ½(‖∇η‖² + ‖∇σ‖²)`.
pub fn objective_value(spec: &ObjectiveSpec<'_>, eta: &ScalarField, sigma: &ScalarField) -> Result<f64> {
    spec.validate()?;
    let reg = GradientRegularizer::new(spec.disc.mesh());
    Ok(evaluate_impl(spec, &reg, eta, sigma, false)?.value)
}

/// Objective and both L²(Ω) gradients. The gradient of a frozen unknown is
/// zero.
pub fn objective_gradient(spec: &ObjectiveSpec<'_>, eta: &ScalarField, sigma: &ScalarField) -> Result<Evaluation> {
    spec.validate()?;
    let reg = GradientRegularizer::new(spec.disc.mesh());
    evaluate_impl(spec, &reg, eta, sigma, true)
}

/// Default weight `1e-6 Φ(x⁰) / R(x⁰ + δ)` where `δ` is a smooth bump whose
/// height equals each initial mean, i.e. a variation on the scale of the
/// coefficient itself. The bump keeps the ratio finite for constant initial
/// guesses.
pub fn default_beta(spec: &ObjectiveSpec<'_>, eta0: &ScalarField, sigma0: &ScalarField) -> Result<f64> {
    let mut unregularized = spec.clone();
    unregularized.beta = 0.0;
    let phi = objective_value(&unregularized, eta0, sigma0)?;
    let mesh = spec.disc.mesh();
    let bump = mesh.sample(|x, y| (0.5 * std::f64::consts::PI * x).cos() * (0.5 * std::f64::consts::PI * y).cos());
    let reg = GradientRegularizer::new(mesh);
    let r = reg.value(&eta0.add(&bump.scale(eta0.mean(mesh))))
        + reg.value(&sigma0.add(&bump.scale(sigma0.mean(mesh))));
    if !(r > 0.0) {
        return Err(Error::InvalidArgument("cannot scale beta: zero initial coefficients".into()));
    }
    Ok(1e-6 * phi / r)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MinimizeOptions {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop when the projected gradient norm is below this fraction of its
    /// initial value.
    pub grad_tol: f64,
    /// Stop when the relative decrease of `Φ` over one iteration is below
    /// this. Zero disables the test.
    pub f_tol: f64,
    pub max_backtracks: usize,
    pub armijo: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            memory: 10,
            grad_tol: 1e-6,
            f_tol: 0.0,
            max_backtracks: 40,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct OptimizerStep {
    pub iteration: usize,
    pub objective: f64,
    pub grad_eta_norm: f64,
    pub grad_sigma_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct OptimizerHistory {
    pub steps: Vec<OptimizerStep>,
}

impl OptimizerHistory {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "iteration,objective,grad_eta_norm,grad_sigma_norm,step")?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                s.iteration, s.objective, s.grad_eta_norm, s.grad_sigma_norm, s.step
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    ObjectiveStalled,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub eta: ScalarField,
    pub sigma: ScalarField,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
    pub history: OptimizerHistory,
}

/// Optimization variable: the active unknowns stacked.
struct Layout {
    n: usize,
    eta: bool,
    sigma: bool,
}

impl Layout {
    fn pack(&self, eta: &ScalarField, sigma: &ScalarField) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.n);
        if self.eta {
            v.extend_from_slice(eta.values());
        }
        if self.sigma {
            v.extend_from_slice(sigma.values());
        }
        v
    }

    fn unpack(&self, v: &[f64], eta0: &ScalarField, sigma0: &ScalarField) -> (ScalarField, ScalarField) {
        let mut off = 0;
        let eta = if self.eta {
            off = self.n;
            ScalarField::new(v[..self.n].to_vec())
        } else {
            eta0.clone()
        };
        let sigma = if self.sigma { ScalarField::new(v[off..off + self.n].to_vec()) } else { sigma0.clone() };
        (eta, sigma)
    }

    fn bounds(&self, spec: &ObjectiveSpec<'_>) -> Vec<(f64, f64)> {
        let mut b = Vec::with_capacity(2 * self.n);
        if self.eta {
            b.extend(std::iter::repeat_n(spec.eta_bounds, self.n));
        }
        if self.sigma {
            b.extend(std::iter::repeat_n(spec.sigma_bounds, self.n));
        }
        b
    }
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    x.iter_mut().zip(bounds).for_each(|(v, &(lo, hi))| *v = v.clamp(lo, hi));
}

/// Projected L-BFGS with Armijo backtracking along the projection arc.
/// Inner products are area weighted so that the quasi-Newton metric matches
/// the L²(Ω) gradients.
pub fn minimize(
    spec: &ObjectiveSpec<'_>,
    eta0: &ScalarField,
    sigma0: &ScalarField,
    opts: &MinimizeOptions,
) -> Result<MinimizeResult> {
    spec.validate()?;
    let n = spec.disc.n_cells();
    check_len("initial eta", n, eta0.len())?;
    check_len("initial sigma", n, sigma0.len())?;
    let layout = Layout {
        n,
        eta: spec.unknowns.eta(),
        sigma: spec.unknowns.sigma(),
    };
    let bounds = layout.bounds(spec);
    let areas: Vec<f64> = {
        let a = spec.disc.mesh().cell_areas();
        let mut w = Vec::with_capacity(bounds.len());
        for _ in 0..(layout.eta as usize + layout.sigma as usize) {
            w.extend_from_slice(a);
        }
        w
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&areas).map(|((x, y), w)| w * x * y).sum() };
    let reg = GradientRegularizer::new(spec.disc.mesh());
    let mut evaluations = 0;
    let mut eval = |x: &[f64]| -> Result<(Evaluation, Vec<f64>)> {
        evaluations += 1;
        let (e, s) = layout.unpack(x, eta0, sigma0);
        let ev = evaluate_impl(spec, &reg, &e, &s, true)?;
        let g = layout.pack(&ev.grad_eta, &ev.grad_sigma);
        Ok((ev, g))
    };

    let mut x = layout.pack(eta0, sigma0);
    project(&mut x, &bounds);
    let (mut ev, mut g) = eval(&x)?;
    let projected_gradient = |x: &[f64], g: &[f64]| -> f64 {
        let mut p: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
        project(&mut p, &bounds);
        let d: Vec<f64> = p.iter().zip(x).map(|(a, b)| a - b).collect();
        dot(&d, &d).sqrt()
    };
    let pg0 = projected_gradient(&x, &g);
    let mut history = OptimizerHistory::default();
    let gnorm = |f: &ScalarField| inner_omega(spec.disc.mesh(), f, f).sqrt();
    history.steps.push(OptimizerStep {
        iteration: 0,
        objective: ev.value,
        grad_eta_norm: gnorm(&ev.grad_eta),
        grad_sigma_norm: gnorm(&ev.grad_sigma),
        step: 0.0,
    });

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    if pg0 == 0.0 {
        stop = StopReason::GradientTolerance;
    }

    while stop == StopReason::MaxIterations && iterations < opts.max_iters {
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let a = dot(s, &q) / dot(y, s);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => {
                // First step: move at most 5% of the current scale.
                let gmax = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                let xmax = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if gmax > 0.0 { 0.05 * xmax.max(1e-3) / gmax } else { 1.0 }
            }
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y), a) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let b = dot(y, &q) / dot(y, s);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&d, &g) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            d = g.iter().map(|v| -gamma.abs() * v).collect();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut trial, &bounds);
            let delta: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &delta);
            if decrease < 0.0 {
                let (e2, g2) = eval(&trial)?;
                if e2.value <= ev.value + opts.armijo * decrease {
                    accepted = Some((trial, e2, g2, delta));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, ev_new, g_new, s)) = accepted else {
            if s_hist.is_empty() {
                stop = StopReason::LineSearchFailed;
                break;
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        iterations += 1;
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let previous = ev.value;
        x = x_new;
        ev = ev_new;
        g = g_new;
        history.steps.push(OptimizerStep {
            iteration: iterations,
            objective: ev.value,
            grad_eta_norm: gnorm(&ev.grad_eta),
            grad_sigma_norm: gnorm(&ev.grad_sigma),
            step,
        });
        if projected_gradient(&x, &g) <= opts.grad_tol * pg0 {
            stop = StopReason::GradientTolerance;
        } else if opts.f_tol > 0.0 && (previous - ev.value) <= opts.f_tol * previous.abs().max(f64::MIN_POSITIVE) {
            stop = StopReason::ObjectiveStalled;
        }
    }

    let (eta, sigma) = layout.unpack(&x, eta0, sigma0);
    Ok(MinimizeResult {
        eta,
        sigma,
        objective: ev.value,
        iterations,
        evaluations,
        stop,
        history,
    })
}
