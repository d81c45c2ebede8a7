//! Multi-source linearized reconstruction of `(η, σ_a,xf)` through the block
//! operator `Π` acting on the pair `(ζ, ξ)`, and Landweber iteration on it.
//!
//! Row `j` of `Π` is
//!
//! ```text
//! general:  (-I + Π_ζ^j) ζ + (I - Π_ξ^j) ξ     ζ = δη σ_a,xf + η δσ,  ξ = δσ
//! partial:  ( I - Π_ζ^j) ζ + Π_ζ^j ξ          ζ = (1-η) σ_a,xf,     ξ = σ_a,xf
//! ```
//!
//! with `Π_ζ = (σ_a,m/φ) Λ_m` and `Π_ξ = (σ_a,x^η/φ) Λ_x + (σ_a,m/φ) Λ_mx`,
//! `φ = K_I u_x^j`. Adjoints are taken in the area-weighted L² products on
//! the square and on phase space, where `K_I* f` replicates `f` over
//! ordinates and multiplication by `u_x` has adjoint `a ↦ K_I(u_x a)`.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::direct::KI_THRESHOLD;
use crate::error::{check_len, Error, Result};
use crate::fpat::{solve_forward_many, ForwardSolution, OpticalMedium};
use crate::grid::{inner_omega, AngularField, BoundarySource, Mesh, ScalarField};
use crate::rte::{Discretization, Sense, SolverOptions, TransportProblem, VolumeSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearModel {
    /// Linearization around a general background `(η, σ_a,xf)`.
    General,
    /// Fluorophore absorption dropped from the excitation equation; exact
    /// and bilinear in `(ζ, ξ)`.
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPair {
    pub zeta: ScalarField,
    pub xi: ScalarField,
}

impl CoefficientPair {
    pub fn zeros(n: usize) -> Self {
        Self {
            zeta: ScalarField::zeros(n),
            xi: ScalarField::zeros(n),
        }
    }

    /// General model: `ζ = δη σ_a,xf + η δσ`, `ξ = δσ`.
    pub fn from_perturbation(medium: &OpticalMedium, d_eta: &ScalarField, d_sigma: &ScalarField) -> Self {
        let zeta = d_eta.mul(&medium.sigma_a_xf).add(&medium.eta.mul(d_sigma));
        Self {
            zeta,
            xi: d_sigma.clone(),
        }
    }

    /// Partial model: `ζ = (1-η) σ_a,xf`, `ξ = σ_a,xf`.
    pub fn from_coefficients(eta: &ScalarField, sigma: &ScalarField) -> Self {
        Self {
            zeta: eta.zip_map(sigma, |e, s| (1.0 - e) * s),
            xi: sigma.clone(),
        }
    }

    pub fn axpy(&self, a: f64, other: &Self) -> Self {
        Self {
            zeta: self.zeta.add(&other.zeta.scale(a)),
            xi: self.xi.add(&other.xi.scale(a)),
        }
    }

    pub fn inner(&self, mesh: &Mesh, other: &Self) -> f64 {
        inner_omega(mesh, &self.zeta, &other.zeta) + inner_omega(mesh, &self.xi, &other.xi)
    }

    pub fn norm(&self, mesh: &Mesh) -> f64 {
        self.inner(mesh, self).sqrt()
    }
}

/// Data-space inner product: sum of the per-source L² products.
pub fn inner_data(mesh: &Mesh, a: &[ScalarField], b: &[ScalarField]) -> f64 {
    a.iter().zip(b).map(|(x, y)| inner_omega(mesh, x, y)).sum()
}

pub fn norm_data(mesh: &Mesh, a: &[ScalarField]) -> f64 {
    inner_data(mesh, a, a).sqrt()
}

/// `Π` for a fixed background and set of illuminations.
#[derive(Debug, Clone)]
pub struct BlockOperator<'a> {
    disc: &'a Discretization,
    medium: OpticalMedium,
    model: LinearModel,
    backgrounds: Vec<ForwardSolution>,
    alpha: f64,
    opts: SolverOptions,
}

impl<'a> BlockOperator<'a> {
    /// Uses precomputed backgrounds. For the partial model `u_x^j` must come
    /// from an excitation solve without fluorophore absorption.
    pub fn new(
        disc: &'a Discretization,
        medium: &OpticalMedium,
        model: LinearModel,
        backgrounds: Vec<ForwardSolution>,
        alpha: f64,
        opts: SolverOptions,
    ) -> Result<Self> {
        let n = disc.n_cells();
        if backgrounds.is_empty() {
            return Err(Error::InvalidArgument("block operator needs at least one source".into()));
        }
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be nonnegative, got {alpha}")));
        }
        if alpha > 0.0 && backgrounds.len() < 2 {
            return Err(Error::InvalidArgument("the alpha shift acts on the second row and needs two sources".into()));
        }
        opts.validate()?;
        match model {
            LinearModel::General => medium.validate_admissible(n)?,
            LinearModel::Partial => medium.validate_known(n)?,
        }
        for (j, fs) in backgrounds.iter().enumerate() {
            check_len("background u_x cells", n, fs.u_x.n_cells())?;
            check_len("background u_x ordinates", disc.n_ords(), fs.u_x.n_ords())?;
            if let Some(c) = fs.k_i_ux.values().iter().position(|&p| !(p >= KI_THRESHOLD)) {
                return Err(Error::Precondition(format!(
                    "K_I(u_x) of source {j} is {:.3e} in cell {c}, below {KI_THRESHOLD:.0e}",
                    fs.k_i_ux.values()[c]
                )));
            }
        }
        Ok(Self {
            disc,
            medium: medium.clone(),
            model,
            backgrounds,
            alpha,
            opts,
        })
    }

    /// Computes the backgrounds from the illuminations.
    pub fn from_sources(
        disc: &'a Discretization,
        medium: &OpticalMedium,
        model: LinearModel,
        sources: &[BoundarySource],
        alpha: f64,
        opts: SolverOptions,
    ) -> Result<Self> {
        let n = disc.n_cells();
        let bg_medium = match model {
            LinearModel::General => medium.clone(),
            LinearModel::Partial => medium
                .clone()
                .with_eta(ScalarField::zeros(n))
                .with_sigma_a_xf(ScalarField::zeros(n)),
        };
        let backgrounds = solve_forward_many(disc, &bg_medium, sources, &opts)?;
        Self::new(disc, medium, model, backgrounds, alpha, opts)
    }

    pub fn model(&self) -> LinearModel {
        self.model
    }

    pub fn n_sources(&self) -> usize {
        self.backgrounds.len()
    }

    pub fn backgrounds(&self) -> &[ForwardSolution] {
        &self.backgrounds
    }

    pub fn medium(&self) -> &OpticalMedium {
        &self.medium
    }

    pub fn discretization(&self) -> &Discretization {
        self.disc
    }

    fn excitation(&self) -> TransportProblem {
        match self.model {
            LinearModel::General => self.medium.excitation_problem(),
            LinearModel::Partial => TransportProblem::new(
                self.medium.sigma_a_xi.add(&self.medium.sigma_s_x),
                self.medium.sigma_s_x.clone(),
                self.medium.kernel,
            ),
        }
    }

    fn solve(&self, p: TransportProblem, source: VolumeSource, sense: Sense, what: &str) -> Result<AngularField> {
        let mut p = p.with_source(source);
        p.sense = sense;
        let (u, rep) = self.disc.solve(&p, &self.opts)?;
        rep.ensure(what)?;
        Ok(u)
    }

    fn s_x(&self, f: AngularField, sense: Sense) -> Result<AngularField> {
        self.solve(self.excitation(), VolumeSource::Angular(f), sense, "excitation solve in block operator")
    }

    fn s_m(&self, f: ScalarField, sense: Sense) -> Result<AngularField> {
        self.solve(self.medium.emission_problem(), VolumeSource::Isotropic(f), sense, "emission solve in block operator")
    }

    fn check_source(&self, j: usize) -> Result<&ForwardSolution> {
        self.backgrounds
            .get(j)
            .ok_or_else(|| Error::InvalidArgument(format!("source index {j} out of range ({})", self.n_sources())))
    }

    /// `Λ_x(f) = K_I S_x(u_x f)`.
    pub fn apply_lambda_x(&self, f: &ScalarField, j: usize) -> Result<ScalarField> {
        let bg = self.check_source(j)?;
        Ok(self.disc.k_i(&self.s_x(bg.u_x.mul_scalar_field(f), Sense::Forward)?))
    }

    /// `Λ_m(f) = K_I S_m(K_I(u_x) f)`.
    pub fn apply_lambda_m(&self, f: &ScalarField, j: usize) -> Result<ScalarField> {
        let bg = self.check_source(j)?;
        Ok(self.disc.k_i(&self.s_m(bg.k_i_ux.mul(f), Sense::Forward)?))
    }

    /// `Λ_mx(f) = K_I S_m(η σ_a,xf K_I S_x(u_x f))`.
    pub fn apply_lambda_mx(&self, f: &ScalarField, j: usize) -> Result<ScalarField> {
        let lx = self.apply_lambda_x(f, j)?;
        let drive = self.medium.eta.mul(&self.medium.sigma_a_xf).mul(&lx);
        Ok(self.disc.k_i(&self.s_m(drive, Sense::Forward)?))
    }

    fn row(&self, pair: &CoefficientPair, j: usize) -> Result<ScalarField> {
        let bg = &self.backgrounds[j];
        let phi = &bg.k_i_ux;
        let n = phi.len();
        let sam = self.medium.sigma_a_m.values();
        let mut out = match self.model {
            LinearModel::General => {
                // One S_x and one S_m solve: the two emission terms share S_m.
                let lx = self.disc.k_i(&self.s_x(bg.u_x.mul_scalar_field(&pair.xi), Sense::Forward)?);
                let ets = self.medium.eta.mul(&self.medium.sigma_a_xf);
                let drive = ScalarField::new(
                    (0..n)
                        .map(|c| phi.values()[c] * pair.zeta.values()[c] - ets.values()[c] * lx.values()[c])
                        .collect(),
                );
                let lm = self.disc.k_i(&self.s_m(drive, Sense::Forward)?);
                let s_eta = self.medium.sigma_a_x_eta();
                ScalarField::new(
                    (0..n)
                        .map(|c| {
                            let p = phi.values()[c];
                            -pair.zeta.values()[c] + pair.xi.values()[c] + sam[c] / p * lm.values()[c]
                                - s_eta.values()[c] / p * lx.values()[c]
                        })
                        .collect(),
                )
            }
            LinearModel::Partial => {
                let drive = pair.xi.sub(&pair.zeta).mul(phi);
                let lm = self.disc.k_i(&self.s_m(drive, Sense::Forward)?);
                ScalarField::new(
                    (0..n)
                        .map(|c| pair.zeta.values()[c] + sam[c] / phi.values()[c] * lm.values()[c])
                        .collect(),
                )
            }
        };
        if j == 1 && self.alpha > 0.0 {
            for (o, x) in out.values_mut().iter_mut().zip(pair.xi.values()) {
                *o += self.alpha * x;
            }
        }
        Ok(out)
    }

    fn row_adjoint(&self, r: &ScalarField, j: usize) -> Result<CoefficientPair> {
        let bg = &self.backgrounds[j];
        let phi = &bg.k_i_ux;
        let n = phi.len();
        let sam = self.medium.sigma_a_m.values();
        // t = K_I S_m*(σ_a,m r / φ), shared by Π_ζ* and the Λ_mx part of Π_ξ*.
        let weighted = ScalarField::new((0..n).map(|c| sam[c] * r.values()[c] / phi.values()[c]).collect());
        let t = self.disc.k_i(&self.s_m(weighted, Sense::Adjoint)?);
        let pi_zeta_star = phi.mul(&t);
        let mut pair = match self.model {
            LinearModel::General => {
                let s_eta = self.medium.sigma_a_x_eta();
                let ets = self.medium.eta.mul(&self.medium.sigma_a_xf);
                let drive = ScalarField::new(
                    (0..n)
                        .map(|c| s_eta.values()[c] * r.values()[c] / phi.values()[c] + ets.values()[c] * t.values()[c])
                        .collect(),
                );
                let sx = self.s_x(self.disc.replicate(&drive), Sense::Adjoint)?;
                let pi_xi_star = self.disc.k_i(&sx.mul_angular(&bg.u_x));
                CoefficientPair {
                    zeta: pi_zeta_star.sub(r),
                    xi: r.sub(&pi_xi_star),
                }
            }
            LinearModel::Partial => CoefficientPair {
                zeta: r.sub(&pi_zeta_star),
                xi: pi_zeta_star,
            },
        };
        if j == 1 && self.alpha > 0.0 {
            pair.xi = pair.xi.add(&r.scale(self.alpha));
        }
        Ok(pair)
    }

    fn check_pair(&self, pair: &CoefficientPair) -> Result<()> {
        check_len("zeta", self.disc.n_cells(), pair.zeta.len())?;
        check_len("xi", self.disc.n_cells(), pair.xi.len())
    }

    /// All rows of `Π (ζ, ξ)`, one per source.
    pub fn apply_pi(&self, pair: &CoefficientPair) -> Result<Vec<ScalarField>> {
        self.check_pair(pair)?;
        (0..self.n_sources()).into_par_iter().map(|j| self.row(pair, j)).collect()
    }

    /// `Π* r`, summed over sources.
    pub fn apply_pi_adjoint(&self, residual: &[ScalarField]) -> Result<CoefficientPair> {
        check_len("residual blocks", self.n_sources(), residual.len())?;
        for r in residual {
            check_len("residual", self.disc.n_cells(), r.len())?;
        }
        let parts = (0..self.n_sources())
            .into_par_iter()
            .map(|j| self.row_adjoint(&residual[j], j))
            .collect::<Result<Vec<_>>>()?;
        let n = self.disc.n_cells();
        Ok(parts.iter().fold(CoefficientPair::zeros(n), |acc, p| acc.axpy(1.0, p)))
    }

    /// Rescales raw data into the right-hand side `z` of `Π (ζ, ξ) = z`.
    /// General: `H'_j / (Ξ K_I u_x^j)`. Partial: `H_j / (Ξ K_I u_x^j) - σ_a,xi`.
    pub fn rescale_data(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>> {
        check_len("data blocks", self.n_sources(), data.len())?;
        Ok(data
            .iter()
            .zip(&self.backgrounds)
            .map(|(h, bg)| {
                let scaled = h.zip_map(&self.medium.xi, |a, b| a / b).zip_map(&bg.k_i_ux, |a, b| a / b);
                match self.model {
                    LinearModel::General => scaled,
                    LinearModel::Partial => scaled.sub(&self.medium.sigma_a_xi),
                }
            })
            .collect())
    }

    /// Estimate of the largest eigenvalue of `Π*Π` by power iteration from
    /// a fixed start.
    pub fn estimate_norm_squared(&self, iterations: usize) -> Result<f64> {
        let mesh = self.disc.mesh();
        let mut v = CoefficientPair {
            zeta: mesh.sample(|x, y| 1.0 + 0.3 * (3.0 * x).sin() * (2.0 * y).cos()),
            xi: mesh.sample(|x, y| 1.0 - 0.2 * (2.0 * x + y).cos()),
        };
        let mut estimate = 0.0;
        for _ in 0..iterations.max(1) {
            let nv = v.norm(mesh);
            v = v.axpy(1.0 / nv - 1.0, &v);
            let pv = self.apply_pi(&v)?;
            estimate = norm_data(mesh, &pv).powi(2);
            v = self.apply_pi_adjoint(&pv)?;
        }
        Ok(estimate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LandweberOptions {
    /// Step size; `None` means `1/L̂` with `L̂` from power iteration.
    pub tau: Option<f64>,
    pub max_iters: usize,
    /// Stop when the update norm falls below this.
    pub tol: f64,
    /// Stop once the residual is at most `1.05` times this.
    pub noise_floor: Option<f64>,
    pub power_iters: usize,
}

impl Default for LandweberOptions {
    fn default() -> Self {
        Self {
            tau: None,
            max_iters: 500,
            tol: 1e-10,
            noise_floor: None,
            power_iters: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LandweberStep {
    pub iteration: usize,
    pub residual: f64,
    pub update_norm: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct LandweberHistory {
    pub steps: Vec<LandweberStep>,
    pub converged: bool,
}

impl LandweberHistory {
    pub fn residuals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.residual).collect()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "iteration,residual,update_norm,tau")?;
        for s in &self.steps {
            writeln!(out, "{},{:.17e},{:.17e},{:.17e}", s.iteration, s.residual, s.update_norm, s.tau)?;
        }
        Ok(())
    }
}

const MAX_REJECTIONS: usize = 3;

/// `(ζ, ξ)_{k+1} = (ζ, ξ)_k - τ Π*(Π(ζ, ξ)_k - z)`.
///
/// A step that would raise the residual is rejected and `τ` halved, so the
/// recorded residuals never increase; three rejections in a row abort.
pub fn landweber_solve(
    op: &BlockOperator<'_>,
    z: &[ScalarField],
    initial: &CoefficientPair,
    opts: &LandweberOptions,
) -> Result<(CoefficientPair, LandweberHistory)> {
    let mesh = op.discretization().mesh();
    check_len("data blocks", op.n_sources(), z.len())?;
    let mut tau = match opts.tau {
        Some(t) if t > 0.0 => t,
        Some(t) => return Err(Error::InvalidArgument(format!("tau must be positive, got {t}"))),
        None => {
            let l = op.estimate_norm_squared(opts.power_iters)?;
            if !(l > 0.0) {
                return Err(Error::InvalidArgument("block operator appears to vanish".into()));
            }
            1.0 / l
        }
    };
    let residual_of = |p: &[ScalarField]| -> Vec<ScalarField> { p.iter().zip(z).map(|(a, b)| a.sub(b)).collect() };

    let mut x = initial.clone();
    let mut r = residual_of(&op.apply_pi(&x)?);
    let mut res = norm_data(mesh, &r);
    let mut history = LandweberHistory::default();
    history.steps.push(LandweberStep {
        iteration: 0,
        residual: res,
        update_norm: 0.0,
        tau,
    });
    let floor = opts.noise_floor.map(|f| 1.05 * f);
    if floor.is_some_and(|f| res <= f) {
        history.converged = true;
        return Ok((x, history));
    }

    let mut rejections = 0;
    let mut k = 0;
    while k < opts.max_iters {
        let g = op.apply_pi_adjoint(&r)?;
        let update_norm = tau * g.norm(mesh);
        if update_norm < opts.tol {
            history.converged = true;
            break;
        }
        let trial = x.axpy(-tau, &g);
        let trial_r = residual_of(&op.apply_pi(&trial)?);
        let trial_res = norm_data(mesh, &trial_r);
        if !trial_res.is_finite() {
            return Err(Error::Diverged("Landweber residual became non-finite".into()));
        }
        if trial_res > res {
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::Diverged(format!(
                    "Landweber residual increased {MAX_REJECTIONS} times in a row at iteration {} (tau {tau:.3e})",
                    k + 1
                )));
            }
            tau *= 0.5;
            continue;
        }
        rejections = 0;
        k += 1;
        x = trial;
        r = trial_r;
        res = trial_res;
        history.steps.push(LandweberStep {
            iteration: k,
            residual: res,
            update_norm,
            tau,
        });
        if floor.is_some_and(|f| res <= f) {
            history.converged = true;
            break;
        }
    }
    Ok((x, history))
}

/// Coefficients recovered from `(ζ, ξ)`.
#[derive(Debug, Clone)]
pub struct BackSubstitution {
    /// General model: `δη`. Partial model: `η`.
    pub eta: ScalarField,
    /// General model: `δσ`. Partial model: `σ_a,xf`.
    pub sigma: ScalarField,
    /// Cells whose divisor fell below the threshold; set to zero.
    pub flagged: Vec<bool>,
}

/// General: `δσ = ξ`, `δη = (ζ - η ξ)/σ_a,xf`. Partial: `σ_a,xf = ξ`,
/// `η = 1 - ζ/ξ`.
pub fn back_substitute(model: LinearModel, medium: &OpticalMedium, pair: &CoefficientPair) -> Result<BackSubstitution> {
    let n = pair.xi.len();
    check_len("zeta", n, pair.zeta.len())?;
    let mut flagged = vec![false; n];
    let eta = match model {
        LinearModel::General => {
            check_len("background sigma_a_xf", n, medium.sigma_a_xf.len())?;
            check_len("background eta", n, medium.eta.len())?;
            (0..n)
                .map(|c| {
                    let s = medium.sigma_a_xf.values()[c];
                    if s.abs() < KI_THRESHOLD {
                        flagged[c] = true;
                        0.0
                    } else {
                        (pair.zeta.values()[c] - medium.eta.values()[c] * pair.xi.values()[c]) / s
                    }
                })
                .collect()
        }
        LinearModel::Partial => (0..n)
            .map(|c| {
                let xi = pair.xi.values()[c];
                if xi.abs() < KI_THRESHOLD {
                    flagged[c] = true;
                    0.0
                } else {
                    1.0 - pair.zeta.values()[c] / xi
                }
            })
            .collect(),
    };
    let sigma = ScalarField::new(
        pair.xi
            .values()
            .iter()
            .zip(&flagged)
            .map(|(&v, &f)| if f && model == LinearModel::Partial { 0.0 } else { v })
            .collect(),
    );
    Ok(BackSubstitution {
        eta: ScalarField::new(eta),
        sigma,
        flagged,
    })
}
