//! Run configuration shared by the command line tool and the experiment
//! harness. Every table and key is optional; omitted values take the
//! defaults below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundarySource, Mesh, OrdinateSet, Side};
use crate::landweber::{LandweberOptions, LinearModel};
use crate::phantoms::PhantomSpec;
use crate::rte::{ScatteringKernel, SolverOptions};
use crate::varrecon::{MinimizeOptions, Unknowns};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; the command line `--out` flag takes precedence.
    pub out: Option<String>,
    pub mesh: MeshConfig,
    pub ordinates: OrdinateConfig,
    pub kernel: ScatteringKernel,
    /// Grüneisen coefficient, constant over the domain.
    pub xi: f64,
    pub phantom: PhantomSpec,
    pub sources: SourceSpec,
    pub noise: NoiseConfig,
    pub solver: SolverOptions,
    pub linearized: LinearizedConfig,
    pub landweber: LandweberConfig,
    pub nonlinear: NonlinearConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2013,
            out: None,
            mesh: MeshConfig::default(),
            ordinates: OrdinateConfig::default(),
            kernel: ScatteringKernel::Isotropic,
            xi: 1.0,
            phantom: PhantomSpec::default(),
            sources: SourceSpec::default(),
            noise: NoiseConfig::default(),
            solver: SolverOptions::krylov(1e-10),
            linearized: LinearizedConfig::default(),
            landweber: LandweberConfig::default(),
            nonlinear: NonlinearConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    /// Squares per side; each square is cut into two triangles.
    pub n_per_side: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { n_per_side: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrdinateConfig {
    pub count: usize,
}

impl Default for OrdinateConfig {
    fn default() -> Self {
        Self { count: 64 }
    }
}

/// Boundary illuminations; one datum is produced per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// A single source entering through every side.
    Uniform { value: f64 },
    /// One source per listed side.
    Sides { sides: Vec<Side>, value: f64 },
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec::Uniform { value: 1.0 }
    }
}

impl SourceSpec {
    pub fn four_sides() -> Self {
        SourceSpec::Sides {
            sides: Side::ALL.to_vec(),
            value: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SourceSpec::Uniform { .. } => 1,
            SourceSpec::Sides { sides, .. } => sides.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn build(&self, mesh: &Mesh, ords: &OrdinateSet) -> Vec<BoundarySource> {
        match self {
            SourceSpec::Uniform { value } => vec![BoundarySource::uniform(mesh, ords, *value)],
            SourceSpec::Sides { sides, value } => {
                sides.iter().map(|&s| BoundarySource::side(mesh, ords, s, *value)).collect()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let value = match self {
            SourceSpec::Uniform { value } => *value,
            SourceSpec::Sides { sides, value } => {
                if sides.is_empty() {
                    return Err(config_error("sources.sides", "at least one side is required"));
                }
                *value
            }
        };
        if !(value > 0.0 && value.is_finite()) {
            return Err(config_error("sources.value", format!("must be positive, got {value}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Noise level in percent for single runs.
    pub gamma: f64,
    /// Replaces the noise ladder of an experiment when set.
    pub ladder: Option<Vec<f64>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { gamma: 0.0, ladder: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearizedBackground {
    /// True `η`, background `σ_a,xf` the mean of the phantom.
    Isotropized,
    /// `η = σ_a,xf = 0`.
    Zero,
}

/// Linearized `σ_a,xf` inversion. In both variants the background `u_x` is
/// replaced by its angular average at every ordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearizedConfig {
    pub background: LinearizedBackground,
}

impl Default for LinearizedConfig {
    fn default() -> Self {
        Self {
            background: LinearizedBackground::Isotropized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandweberConfig {
    pub model: LinearModel,
    /// Shift on the first source's row; needs at least two sources.
    pub alpha: f64,
    /// Step length; `1/‖Π‖²` estimated by power iteration when absent.
    pub tau: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
    pub noise_floor: Option<f64>,
    pub power_iters: usize,
}

impl Default for LandweberConfig {
    fn default() -> Self {
        let o = LandweberOptions::default();
        Self {
            model: LinearModel::General,
            alpha: 0.0,
            tau: o.tau,
            max_iters: o.max_iters,
            tol: o.tol,
            noise_floor: o.noise_floor,
            power_iters: o.power_iters,
        }
    }
}

impl LandweberConfig {
    pub fn options(&self) -> LandweberOptions {
        LandweberOptions {
            tau: self.tau,
            max_iters: self.max_iters,
            tol: self.tol,
            noise_floor: self.noise_floor,
            power_iters: self.power_iters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// Area-weighted mean of the true coefficient.
    Mean,
    /// The phantom's background value.
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlinearConfig {
    pub unknowns: Unknowns,
    /// Regularization weight; scaled from the initial objective when absent.
    pub beta: Option<f64>,
    pub initial: InitialGuess,
    pub max_iters: usize,
    pub memory: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
    pub max_backtracks: usize,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        let o = MinimizeOptions::default();
        Self {
            unknowns: Unknowns::Both,
            beta: None,
            initial: InitialGuess::Mean,
            max_iters: o.max_iters,
            memory: o.memory,
            grad_tol: o.grad_tol,
            f_tol: o.f_tol,
            max_backtracks: o.max_backtracks,
        }
    }
}

impl NonlinearConfig {
    pub fn options(&self) -> MinimizeOptions {
        MinimizeOptions {
            max_iters: self.max_iters,
            memory: self.memory,
            grad_tol: self.grad_tol,
            f_tol: self.f_tol,
            max_backtracks: self.max_backtracks,
            ..MinimizeOptions::default()
        }
    }
}

fn config_error(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

impl RunConfig {
    /// Checks every parameter against the preconditions of the stage that
    /// will consume it, so that no solve starts on a bad configuration.
    pub fn validate(&self) -> Result<()> {
        if self.mesh.n_per_side < 2 {
            return Err(config_error("mesh.n_per_side", "must be at least 2"));
        }
        let n = self.ordinates.count;
        if n < 4 || !n.is_multiple_of(2) {
            return Err(config_error("ordinates.count", format!("must be even and at least 4, got {n}")));
        }
        if let ScatteringKernel::HenyeyGreenstein { g } = self.kernel {
            if !(g > -1.0 && g < 1.0) {
                return Err(config_error("kernel.g", format!("must lie in (-1, 1), got {g}")));
            }
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(config_error("xi", format!("must be positive, got {}", self.xi)));
        }
        self.phantom.validate().map_err(|e| config_error("phantom", e))?;
        self.sources.validate()?;
        let gammas = std::iter::once(self.noise.gamma).chain(self.noise.ladder.iter().flatten().copied());
        for g in gammas {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(config_error("noise", format!("levels must be nonnegative, got {g}")));
            }
        }
        if matches!(&self.noise.ladder, Some(l) if l.is_empty()) {
            return Err(config_error("noise.ladder", "must not be empty"));
        }
        self.solver.validate().map_err(|e| config_error("solver", e))?;

        let lw = &self.landweber;
        if !(lw.alpha >= 0.0 && lw.alpha.is_finite()) {
            return Err(config_error("landweber.alpha", format!("must be nonnegative, got {}", lw.alpha)));
        }
        if lw.alpha > 0.0 && self.sources.len() < 2 {
            return Err(config_error("landweber.alpha", "a positive shift needs at least two sources"));
        }
        if matches!(lw.tau, Some(t) if !(t > 0.0 && t.is_finite())) {
            return Err(config_error("landweber.tau", "must be positive"));
        }
        if matches!(lw.noise_floor, Some(t) if !(t >= 0.0)) {
            return Err(config_error("landweber.noise_floor", "must be nonnegative"));
        }
        if lw.max_iters == 0 || lw.power_iters == 0 || !(lw.tol >= 0.0) {
            return Err(config_error("landweber", "max_iters and power_iters must be positive, tol nonnegative"));
        }

        let nl = &self.nonlinear;
        if matches!(nl.beta, Some(b) if !(b >= 0.0 && b.is_finite())) {
            return Err(config_error("nonlinear.beta", "must be nonnegative"));
        }
        if nl.max_iters == 0 || nl.memory == 0 || !(nl.grad_tol >= 0.0) || !(nl.f_tol >= 0.0) {
            return Err(config_error(
                "nonlinear",
                "max_iters and memory must be positive, tolerances nonnegative",
            ));
        }
        Ok(())
    }
}
