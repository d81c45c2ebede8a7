//! Coefficient phantoms, the multiplicative noise model and the relative
//! error metric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{norm_omega, Mesh, ScalarField};

fn parity(x: f64, y: f64) -> f64 {
    ((2.0 * x).floor() as i64 + (2.0 * y).floor() as i64).rem_euclid(2) as f64
}

/// `σ_a^b (2 - parity)`: `2σ_a^b` on even squares, `σ_a^b` on odd ones.
pub fn checkerboard_absorption(mesh: &Mesh, base: f64) -> ScalarField {
    mesh.sample(|x, y| base * (2.0 - parity(x, y)))
}

/// `σ_s^b (1 + parity)`: high where the absorption is low.
pub fn checkerboard_scattering(mesh: &Mesh, base: f64) -> ScalarField {
    mesh.sample(|x, y| base * (1.0 + parity(x, y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Noise level in percent.
    pub gamma: f64,
    pub seed: u64,
}

/// Multiplies every value by `1 + γ·10⁻²·N(0,1)`. Draws come from a ChaCha8
/// stream seeded with `spec.seed` (ziggurat normal sampler), so the same seed
/// yields the same draws at every `γ`.
pub fn add_noise(h: &ScalarField, spec: &NoiseSpec) -> Result<ScalarField> {
    if !(spec.gamma >= 0.0 && spec.gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level must be nonnegative, got {}", spec.gamma)));
    }
    if spec.gamma == 0.0 {
        return Ok(h.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.gamma * 1e-2;
    let noisy = h
        .values()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v * (1.0 + scale * z)
        })
        .collect();
    Ok(ScalarField::new(noisy))
}

/// `100 ‖recon - truth‖ / ‖truth‖` in the area-weighted L² norm.
pub fn relative_l2_error(mesh: &Mesh, recon: &ScalarField, truth: &ScalarField) -> Result<f64> {
    crate::error::check_len("recon", truth.len(), recon.len())?;
    let denom = norm_omega(mesh, truth);
    if denom == 0.0 {
        return Err(Error::InvalidArgument("relative error against a zero truth".into()));
    }
    Ok(100.0 * norm_omega(mesh, &recon.sub(truth)) / denom)
}

/// As [`relative_l2_error`] but restricted to cells where `mask` is true.
pub fn relative_l2_error_masked(mesh: &Mesh, recon: &ScalarField, truth: &ScalarField, mask: &[bool]) -> Result<f64> {
    crate::error::check_len("mask", truth.len(), mask.len())?;
    let keep = |f: &ScalarField| {
        ScalarField::new(f.values().iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect())
    };
    relative_l2_error(mesh, &keep(recon), &keep(truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Disk { center: [f64; 2], radius: f64 },
    Rectangle { center: [f64; 2], half_width: f64, half_height: f64 },
}

impl Shape {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Shape::Disk { center, radius } => (p[0] - center[0]).hypot(p[1] - center[1]) <= radius,
            Shape::Rectangle {
                center,
                half_width,
                half_height,
            } => (p[0] - center[0]).abs() <= half_width && (p[1] - center[1]).abs() <= half_height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    #[serde(flatten)]
    pub shape: Shape,
    pub value: f64,
}

/// Piecewise-constant phantom; later inclusions overwrite earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub base_absorption: f64,
    pub base_scattering: f64,
    pub eta_background: f64,
    pub eta_inclusions: Vec<Inclusion>,
    pub sigma_background: f64,
    pub sigma_inclusions: Vec<Inclusion>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let disk = |x: f64, y: f64, r: f64, value: f64| Inclusion {
            shape: Shape::Disk { center: [x, y], radius: r },
            value,
        };
        Self {
            base_absorption: 0.1,
            base_scattering: 1.0,
            eta_background: 0.5,
            eta_inclusions: vec![disk(-0.45, 0.4, 0.3, 0.8), disk(0.4, -0.45, 0.25, 0.8)],
            sigma_background: 0.1,
            sigma_inclusions: vec![disk(0.45, 0.45, 0.25, 0.3), disk(-0.4, -0.35, 0.3, 0.3)],
        }
    }
}

/// Admissible box for the reconstructed pair.
pub const ETA_BOUNDS: (f64, f64) = (0.01, 0.99);
pub const SIGMA_BOUNDS: (f64, f64) = (1e-4, 10.0);

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_absorption > 0.0) {
            return Err(Error::InvalidArgument(format!("base_absorption must be positive, got {}", self.base_absorption)));
        }
        if !(self.base_scattering >= 0.0) {
            return Err(Error::InvalidArgument(format!("base_scattering must be nonnegative, got {}", self.base_scattering)));
        }
        let etas = std::iter::once(self.eta_background).chain(self.eta_inclusions.iter().map(|i| i.value));
        for v in etas {
            if !(v >= ETA_BOUNDS.0 && v <= ETA_BOUNDS.1) {
                return Err(Error::CoefficientBounds(format!("eta value {v} outside [{}, {}]", ETA_BOUNDS.0, ETA_BOUNDS.1)));
            }
        }
        let sigmas = std::iter::once(self.sigma_background).chain(self.sigma_inclusions.iter().map(|i| i.value));
        for v in sigmas {
            if !(v >= SIGMA_BOUNDS.0 && v <= SIGMA_BOUNDS.1) {
                return Err(Error::CoefficientBounds(format!(
                    "sigma_a_xf value {v} outside [{}, {}]",
                    SIGMA_BOUNDS.0, SIGMA_BOUNDS.1
                )));
            }
        }
        Ok(())
    }
}

fn paint(mesh: &Mesh, background: f64, inclusions: &[Inclusion]) -> ScalarField {
    ScalarField::new(
        mesh.cell_centroids()
            .iter()
            .map(|&p| inclusions.iter().rev().find(|i| i.shape.contains(p)).map_or(background, |i| i.value))
            .collect(),
    )
}

/// `(η, σ_a,xf)` fields of the phantom, evaluated at cell centroids.
pub fn build_phantom_fields(spec: &PhantomSpec, mesh: &Mesh) -> Result<(ScalarField, ScalarField)> {
    spec.validate()?;
    Ok((
        paint(mesh, spec.eta_background, &spec.eta_inclusions),
        paint(mesh, spec.sigma_background, &spec.sigma_inclusions),
    ))
}
