//! Synthetic reconstruction studies on the checkerboard medium.
//!
//! Known coefficients: `σ_a,xi = σ_a,m` is the checkerboard absorption and
//! `σ_s,x = σ_s,m` the checkerboard scattering, both scaled by the phantom's
//! base values. The unknown pair `(η, σ_a,xf)` comes from the phantom.
//!
//! | study | algorithm | kernel | `σ_s^b` | sources | noise ladder |
//! |---|---|---|---|---|---|
//! | 1 | direct `η` | isotropic | 1 and 9 | uniform | 0, 2, 5, 10 |
//! | 2 | nonlinear, `σ_a,xf` only | isotropic / HG 0.9 | 1 / 9 | uniform | 0, 2, 5, 10 |
//! | 3 | Landweber, linearized data | HG 0.5 | 1 | four sides | 0, 2, 5, 10 |
//! | 4 | nonlinear, both | HG 0.5 | 1 | four sides | 0, 1, 2 |

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{InitialGuess, LinearizedBackground, RunConfig, SourceSpec};
use crate::direct::{
    reconstruct_dsigma_linearized_with_background, reconstruct_dsigma_zero_background, reconstruct_eta_direct,
};
use crate::error::{Error, Result};
use crate::fpat::{compute_datum, compute_linearized_datum, solve_forward, solve_linearized, OpticalMedium};
use crate::grid::{BoundarySource, ScalarField};
use crate::landweber::{back_substitute, landweber_solve, BlockOperator, CoefficientPair, LandweberHistory, LinearModel};
use crate::phantoms::{
    add_noise, build_phantom_fields, checkerboard_absorption, checkerboard_scattering, relative_l2_error,
    relative_l2_error_masked, NoiseSpec,
};
use crate::rte::{Discretization, ScatteringKernel};
use crate::varrecon::{default_beta, minimize, ObjectiveSpec, OptimizerHistory, StopReason, Unknowns};

/// A discretized medium with its true unknowns and illuminations.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub disc: Discretization,
    /// Known coefficients together with the true `(η, σ_a,xf)`.
    pub truth: OpticalMedium,
    pub sources: Vec<BoundarySource>,
}

impl Scenario {
    /// Builds the scenario of `cfg`, replacing its kernel, base scattering
    /// and sources when overrides are given.
    pub fn from_config(
        cfg: &RunConfig,
        kernel: Option<ScatteringKernel>,
        base_scattering: Option<f64>,
        sources: Option<&SourceSpec>,
    ) -> Result<Self> {
        cfg.validate()?;
        let disc = Discretization::build(cfg.mesh.n_per_side, cfg.ordinates.count)?;
        let mesh = disc.mesh();
        let (eta, sigma) = build_phantom_fields(&cfg.phantom, mesh)?;
        let absorption = checkerboard_absorption(mesh, cfg.phantom.base_absorption);
        let scattering = checkerboard_scattering(mesh, base_scattering.unwrap_or(cfg.phantom.base_scattering));
        let truth = OpticalMedium {
            sigma_a_xi: absorption.clone(),
            sigma_a_m: absorption,
            sigma_s_x: scattering.clone(),
            sigma_s_m: scattering,
            xi: ScalarField::constant(disc.n_cells(), cfg.xi),
            kernel: kernel.unwrap_or(cfg.kernel),
            eta,
            sigma_a_xf: sigma,
        };
        let sources = sources.unwrap_or(&cfg.sources).build(mesh, disc.ordinates());
        Ok(Self { disc, truth, sources })
    }

    pub fn eta(&self) -> &ScalarField {
        &self.truth.eta
    }

    pub fn sigma(&self) -> &ScalarField {
        &self.truth.sigma_a_xf
    }

    fn mean_field(&self, f: &ScalarField) -> ScalarField {
        ScalarField::constant(self.disc.n_cells(), f.mean(self.disc.mesh()))
    }
}

/// Noise for source `j` draws from seed `seed + j`, identical across noise
/// levels.
pub fn noisy(h: &ScalarField, gamma: f64, seed: u64, j: usize) -> Result<ScalarField> {
    add_noise(h, &NoiseSpec { gamma, seed: seed.wrapping_add(j as u64) })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub label: String,
    pub gamma: f64,
    /// Relative L² errors in percent.
    pub eta_error: Option<f64>,
    pub sigma_error: Option<f64>,
    pub flagged_cells: usize,
    pub iterations: Option<usize>,
    pub objective: Option<f64>,
    pub beta: Option<f64>,
    pub stop: Option<String>,
    /// Kept out of the serialized metrics so that reruns are byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub enum History {
    Landweber(LandweberHistory),
    Optimizer(OptimizerHistory),
}

impl History {
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        match self {
            History::Landweber(h) => h.write_csv(out),
            History::Optimizer(h) => h.write_csv(out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub eta: Option<ScalarField>,
    pub sigma: Option<ScalarField>,
    pub history: Option<History>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub experiment: Option<u8>,
    pub n_cells: usize,
    pub n_ordinates: usize,
    pub runs: Vec<RunMetrics>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub experiment: Option<u8>,
    pub n_cells: usize,
    pub n_ordinates: usize,
    pub runs: Vec<RunOutcome>,
}

impl ExperimentReport {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            experiment: self.experiment,
            n_cells: self.n_cells,
            n_ordinates: self.n_ordinates,
            runs: self.runs.iter().map(|r| r.metrics.clone()).collect(),
        }
    }

    pub fn run(&self, label: &str, gamma: f64) -> Option<&RunOutcome> {
        self.runs.iter().find(|r| r.metrics.label == label && r.metrics.gamma == gamma)
    }
}

fn blank(label: &str, gamma: f64) -> RunMetrics {
    RunMetrics {
        label: label.to_string(),
        gamma,
        eta_error: None,
        sigma_error: None,
        flagged_cells: 0,
        iterations: None,
        objective: None,
        beta: None,
        stop: None,
        wall_seconds: 0.0,
    }
}

/// Clean nonlinear data, one field per source.
pub fn synthetic_data(sc: &Scenario, cfg: &RunConfig) -> Result<Vec<ScalarField>> {
    sc.sources
        .par_iter()
        .map(|g| Ok(compute_datum(&sc.truth, &solve_forward(&sc.disc, &sc.truth, g, &cfg.solver)?)))
        .collect()
}

/// Direct reconstruction of `η` from the first source's datum.
pub fn eta_direct_run(sc: &Scenario, cfg: &RunConfig, clean: &[ScalarField], gamma: f64, label: &str) -> Result<RunOutcome> {
    let t = Instant::now();
    let h = noisy(&clean[0], gamma, cfg.seed, 0)?;
    let mut r = reconstruct_eta_direct(&sc.disc, &sc.truth, &sc.sources[0], &h, &cfg.solver)?;
    let e = r.evaluate(sc.disc.mesh(), sc.eta())?;
    let mut m = blank(label, gamma);
    m.eta_error = Some(e);
    m.flagged_cells = r.n_flagged();
    m.wall_seconds = t.elapsed().as_secs_f64();
    Ok(RunOutcome {
        metrics: m,
        eta: Some(r.field),
        sigma: None,
        history: None,
    })
}

/// Linearized `δσ_a,xf` with `η` known, on the configured background.
pub fn sigma_linearized_run(sc: &Scenario, cfg: &RunConfig, gamma: f64, label: &str) -> Result<RunOutcome> {
    let t = Instant::now();
    let disc = &sc.disc;
    let mesh = disc.mesh();
    let n = disc.n_cells();
    let (background, d_eta, d_sigma) = match cfg.linearized.background {
        LinearizedBackground::Isotropized => {
            let s0 = sc.mean_field(sc.sigma());
            let d = sc.sigma().sub(&s0);
            (sc.truth.clone().with_sigma_a_xf(s0), ScalarField::zeros(n), d)
        }
        LinearizedBackground::Zero => {
            let bg = sc.truth.clone().with_eta(ScalarField::zeros(n)).with_sigma_a_xf(ScalarField::zeros(n));
            (bg, sc.eta().clone(), sc.sigma().clone())
        }
    };
    // Both inversions need an isotropic excitation field, which no boundary
    // source produces in an absorbing medium.
    let fs = solve_forward(disc, &background, &sc.sources[0], &cfg.solver)?.isotropized(disc);
    let (v_x, v_m) = solve_linearized(disc, &background, &fs, &d_eta, &d_sigma, &cfg.solver)?;
    let h = compute_linearized_datum(disc, &background, &fs, &d_eta, &d_sigma, &v_x, &v_m);
    let h = noisy(&h, gamma, cfg.seed, 0)?;
    let mut r = match cfg.linearized.background {
        LinearizedBackground::Isotropized => {
            reconstruct_dsigma_linearized_with_background(disc, &background, &fs, &h, &cfg.solver)?
        }
        LinearizedBackground::Zero => reconstruct_dsigma_zero_background(disc, &background, &fs, &h, &cfg.solver)?,
    };
    r.field = r.field.add(&background.sigma_a_xf);
    let e = r.evaluate(mesh, sc.sigma())?;
    let mut m = blank(label, gamma);
    m.sigma_error = Some(e);
    m.flagged_cells = r.n_flagged();
    m.wall_seconds = t.elapsed().as_secs_f64();
    Ok(RunOutcome {
        metrics: m,
        eta: None,
        sigma: Some(r.field),
        history: None,
    })
}

/// Landweber on data from the linearized model around the mean of the true
/// coefficients. Errors are for the full coefficients.
pub fn landweber_run(sc: &Scenario, cfg: &RunConfig, gamma: f64, label: &str) -> Result<RunOutcome> {
    let t = Instant::now();
    let disc = &sc.disc;
    let mesh = disc.mesh();
    let n = disc.n_cells();
    let model = cfg.landweber.model;
    let (eta0, sigma0) = (sc.mean_field(sc.eta()), sc.mean_field(sc.sigma()));
    let background = sc.truth.clone().with_eta(eta0.clone()).with_sigma_a_xf(sigma0.clone());
    let op = BlockOperator::from_sources(disc, &background, model, &sc.sources, cfg.landweber.alpha, cfg.solver)?;

    let (d_eta, d_sigma) = (sc.eta().sub(&eta0), sc.sigma().sub(&sigma0));
    let clean: Vec<ScalarField> = match model {
        LinearModel::General => op
            .backgrounds()
            .par_iter()
            .map(|fs| {
                let (v_x, v_m) = solve_linearized(disc, &background, fs, &d_eta, &d_sigma, &cfg.solver)?;
                Ok(compute_linearized_datum(disc, &background, fs, &d_eta, &d_sigma, &v_x, &v_m))
            })
            .collect::<Result<_>>()?,
        LinearModel::Partial => {
            // Partially linearized datum H = Ξ K_I u_x (σ_a,xi + Π(ζ, ξ)).
            let pair = CoefficientPair::from_coefficients(sc.eta(), sc.sigma());
            let z = op.apply_pi(&pair)?;
            z.iter()
                .zip(op.backgrounds())
                .map(|(z, fs)| {
                    ScalarField::new(
                        (0..n)
                            .map(|c| {
                                background.xi.values()[c]
                                    * fs.k_i_ux.values()[c]
                                    * (z.values()[c] + background.sigma_a_xi.values()[c])
                            })
                            .collect(),
                    )
                })
                .collect()
        }
    };
    let data = clean
        .iter()
        .enumerate()
        .map(|(j, h)| noisy(h, gamma, cfg.seed, j))
        .collect::<Result<Vec<_>>>()?;
    let z = op.rescale_data(&data)?;
    let (pair, history) = landweber_solve(&op, &z, &CoefficientPair::zeros(n), &cfg.landweber.options())?;
    let b = back_substitute(model, &background, &pair)?;
    let (eta, sigma) = match model {
        LinearModel::General => (b.eta.add(&eta0), b.sigma.add(&sigma0)),
        LinearModel::Partial => (b.eta, b.sigma),
    };
    let keep: Vec<bool> = b.flagged.iter().map(|f| !f).collect();
    let mut m = blank(label, gamma);
    m.eta_error = Some(relative_l2_error_masked(mesh, &eta, sc.eta(), &keep)?);
    m.sigma_error = Some(relative_l2_error(mesh, &sigma, sc.sigma())?);
    m.flagged_cells = b.flagged.iter().filter(|&&f| f).count();
    m.iterations = Some(history.steps.len().saturating_sub(1));
    m.objective = history.steps.last().map(|s| s.residual);
    m.stop = Some(if history.converged { "converged" } else { "max_iterations" }.into());
    m.wall_seconds = t.elapsed().as_secs_f64();
    Ok(RunOutcome {
        metrics: m,
        eta: Some(eta),
        sigma: Some(sigma),
        history: Some(History::Landweber(history)),
    })
}

/// Nonlinear least-squares reconstruction of the selected unknowns. A
/// frozen unknown is held at its true value.
pub fn nonlinear_run(
    sc: &Scenario,
    cfg: &RunConfig,
    clean: &[ScalarField],
    unknowns: Unknowns,
    gamma: f64,
    label: &str,
) -> Result<RunOutcome> {
    let t = Instant::now();
    let disc = &sc.disc;
    let mesh = disc.mesh();
    let n = disc.n_cells();
    let data = clean
        .iter()
        .enumerate()
        .map(|(j, h)| noisy(h, gamma, cfg.seed, j))
        .collect::<Result<Vec<_>>>()?;
    let guess = |truth: &ScalarField, background: f64| match cfg.nonlinear.initial {
        InitialGuess::Mean => sc.mean_field(truth),
        InitialGuess::Background => ScalarField::constant(n, background),
    };
    let eta0 = if unknowns == Unknowns::Sigma { sc.eta().clone() } else { guess(sc.eta(), cfg.phantom.eta_background) };
    let sigma0 =
        if unknowns == Unknowns::Eta { sc.sigma().clone() } else { guess(sc.sigma(), cfg.phantom.sigma_background) };
    let mut spec = ObjectiveSpec::new(disc, sc.truth.clone(), sc.sources.clone(), data, unknowns);
    spec.opts = cfg.solver;
    spec.beta = match cfg.nonlinear.beta {
        Some(b) => b,
        None => default_beta(&spec, &eta0, &sigma0)?,
    };
    let r = minimize(&spec, &eta0, &sigma0, &cfg.nonlinear.options())?;
    let mut m = blank(label, gamma);
    if unknowns != Unknowns::Sigma {
        m.eta_error = Some(relative_l2_error(mesh, &r.eta, sc.eta())?);
    }
    if unknowns != Unknowns::Eta {
        m.sigma_error = Some(relative_l2_error(mesh, &r.sigma, sc.sigma())?);
    }
    m.iterations = Some(r.iterations);
    m.objective = Some(r.objective);
    m.beta = Some(spec.beta);
    m.stop = Some(
        match r.stop {
            StopReason::GradientTolerance => "gradient_tolerance",
            StopReason::ObjectiveStalled => "objective_stalled",
            StopReason::MaxIterations => "max_iterations",
            StopReason::LineSearchFailed => "line_search_failed",
        }
        .into(),
    );
    m.wall_seconds = t.elapsed().as_secs_f64();
    Ok(RunOutcome {
        metrics: m,
        eta: (unknowns != Unknowns::Sigma).then_some(r.eta),
        sigma: (unknowns != Unknowns::Eta).then_some(r.sigma),
        history: Some(History::Optimizer(r.history)),
    })
}

pub fn default_ladder(which: u8) -> Vec<f64> {
    match which {
        4 => vec![0.0, 1.0, 2.0],
        _ => vec![0.0, 2.0, 5.0, 10.0],
    }
}

fn report(sc: &Scenario, which: Option<u8>, runs: Vec<RunOutcome>) -> ExperimentReport {
    ExperimentReport {
        experiment: which,
        n_cells: sc.disc.n_cells(),
        n_ordinates: sc.disc.n_ords(),
        runs,
    }
}

/// Runs study `which` (1 to 4) on the mesh, phantom, absorption, solver and
/// algorithm settings of `cfg`. Kernel, scattering strength and sources are
/// fixed by the study; the noise ladder can be replaced via `noise.ladder`.
pub fn run_experiment(cfg: &RunConfig, which: u8) -> Result<ExperimentReport> {
    cfg.validate()?;
    let ladder = cfg.noise.ladder.clone().unwrap_or_else(|| default_ladder(which));
    let uniform = SourceSpec::Uniform { value: 1.0 };
    let sides = SourceSpec::four_sides();
    let hg = |g| ScatteringKernel::HenyeyGreenstein { g };
    let mut runs = Vec::new();
    let mut last = None;
    match which {
        1 | 2 => {
            let cases: Vec<(String, ScatteringKernel, f64)> = if which == 1 {
                vec![
                    ("scattering_1".into(), ScatteringKernel::Isotropic, 1.0),
                    ("scattering_9".into(), ScatteringKernel::Isotropic, 9.0),
                ]
            } else {
                vec![
                    ("isotropic_scattering_1".into(), ScatteringKernel::Isotropic, 1.0),
                    ("hg0.9_scattering_9".into(), hg(0.9), 9.0),
                ]
            };
            for (label, kernel, sb) in cases {
                let sc = Scenario::from_config(cfg, Some(kernel), Some(sb), Some(&uniform))?;
                let clean = synthetic_data(&sc, cfg)?;
                let mut case_runs = ladder
                    .par_iter()
                    .map(|&gamma| {
                        if which == 1 {
                            eta_direct_run(&sc, cfg, &clean, gamma, &label)
                        } else {
                            nonlinear_run(&sc, cfg, &clean, Unknowns::Sigma, gamma, &label)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                runs.append(&mut case_runs);
                last = Some(sc);
            }
        }
        3 | 4 => {
            let sc = Scenario::from_config(cfg, Some(hg(0.5)), Some(1.0), Some(&sides))?;
            let clean = if which == 4 { synthetic_data(&sc, cfg)? } else { Vec::new() };
            runs = ladder
                .par_iter()
                .map(|&gamma| {
                    if which == 3 {
                        landweber_run(&sc, cfg, gamma, "landweber")
                    } else {
                        nonlinear_run(&sc, cfg, &clean, Unknowns::Both, gamma, "nonlinear")
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            last = Some(sc);
        }
        _ => return Err(Error::Config(format!("experiment must be 1, 2, 3 or 4, got {which}"))),
    }
    let sc = last.expect("every study builds a scenario");
    Ok(report(&sc, Some(which), runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operation {
    EtaDirect,
    SigmaLinearized,
    Landweber,
    Nonlinear,
}

/// One reconstruction on the scenario of `cfg` at noise level
/// `cfg.noise.gamma`.
pub fn run_single(cfg: &RunConfig, op: Operation) -> Result<ExperimentReport> {
    let sc = Scenario::from_config(cfg, None, None, None)?;
    let gamma = cfg.noise.gamma;
    let run = match op {
        Operation::EtaDirect => eta_direct_run(&sc, cfg, &synthetic_data(&sc, cfg)?, gamma, "eta_direct")?,
        Operation::SigmaLinearized => sigma_linearized_run(&sc, cfg, gamma, "sigma_linearized")?,
        Operation::Landweber => landweber_run(&sc, cfg, gamma, "landweber")?,
        Operation::Nonlinear => {
            nonlinear_run(&sc, cfg, &synthetic_data(&sc, cfg)?, cfg.nonlinear.unknowns, gamma, "nonlinear")?
        }
    };
    Ok(report(&sc, None, vec![run]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.mesh.n_per_side = 6;
        c.ordinates.count = 8;
        c
    }

    #[test]
    fn scenario_uses_checkerboard_layout() {
        let c = small();
        let sc = Scenario::from_config(&c, None, Some(9.0), Some(&SourceSpec::four_sides())).unwrap();
        assert_eq!(sc.sources.len(), 4);
        assert_eq!(sc.truth.sigma_a_xi, sc.truth.sigma_a_m);
        assert_eq!(sc.truth.sigma_s_x.max(), 18.0);
        assert_eq!(sc.truth.sigma_s_x.min(), 9.0);
        assert_eq!(sc.truth.xi, ScalarField::constant(sc.disc.n_cells(), 1.0));
    }

    #[test]
    fn noise_free_single_runs_recover_truth() {
        let c = small();
        let eta = run_single(&c, Operation::EtaDirect).unwrap();
        assert!(eta.runs[0].metrics.eta_error.unwrap() < 1e-6);
        let sig = run_single(&c, Operation::SigmaLinearized).unwrap();
        assert!(sig.runs[0].metrics.sigma_error.unwrap() < 1e-6);
        let mut z = c.clone();
        z.linearized.background = LinearizedBackground::Zero;
        let sig0 = run_single(&z, Operation::SigmaLinearized).unwrap();
        assert!(sig0.runs[0].metrics.sigma_error.unwrap() < 1e-6);
    }

    #[test]
    fn experiment_is_reproducible() {
        let mut c = small();
        c.noise.ladder = Some(vec![0.0, 2.0]);
        let a = run_experiment(&c, 1).unwrap();
        let b = run_experiment(&c, 1).unwrap();
        assert_eq!(a.runs.len(), 4);
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.metrics.eta_error, y.metrics.eta_error);
            assert_eq!(x.eta, y.eta);
        }
        assert!(a.run("scattering_1", 2.0).unwrap().metrics.eta_error.unwrap() > 1.0);
        assert!(run_experiment(&c, 5).is_err());
    }
}
