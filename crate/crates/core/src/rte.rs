//! Steady radiative transport on the triangulated square: first-order upwind
//! finite volumes in space, discrete ordinates in angle.
//!
//! For one ordinate `v` the cell balance reads
//!
//! ```text
//! u_c (Σ_out (v·n) L + σ_t |T_c|) = |T_c| S_c + Σ_in |v·n| L u_upwind
//! ```
//!
//! which is solved cell by cell in topological order of the upwind graph. The
//! scattering coupling is resolved either by source iteration or by GMRES on
//! the same lagged-source fixed point.
//!
//! The scheme for `-v` is the exact transpose of the scheme for `v` under the
//! area-weighted inner product (the outflow sum of a closed cell equals its
//! inflow sum), so adjoint solves reuse the forward sweep of the opposite
//! ordinate and the discrete adjoint identity holds to solver tolerance.

use crate::error::{check_len, Error, Result};
use crate::grid::{
    classify, AngularField, BoundarySource, FaceNeighbor, Flow, Mesh, OrdinateSet, ScalarField,
    GRAZING_EPS,
};
use crate::krylov::gmres;

/// Angular redistribution law `Θ(v·v')`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScatteringKernel {
    Isotropic,
    HenyeyGreenstein { g: f64 },
}

impl ScatteringKernel {
    pub fn henyey_greenstein(g: f64) -> Result<Self> {
        if !(g > -1.0 && g < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Henyey-Greenstein anisotropy must lie in (-1,1), got {g}"
            )));
        }
        Ok(Self::HenyeyGreenstein { g })
    }

    /// Two-dimensional kernel value for a scattering cosine.
    pub fn evaluate(&self, cos_theta: f64) -> f64 {
        match *self {
            Self::Isotropic => 1.0 / (2.0 * std::f64::consts::PI),
            Self::HenyeyGreenstein { g } => {
                (1.0 - g * g) / (2.0 * std::f64::consts::PI * (1.0 + g * g - 2.0 * g * cos_theta))
            }
        }
    }

    pub fn is_isotropic(&self) -> bool {
        match *self {
            Self::Isotropic => true,
            Self::HenyeyGreenstein { g } => g == 0.0,
        }
    }
}

/// Quadrature form of `K_Θ`: `(K_Θ u)_j = Σ_k m[j][k] u_k`, with every row
/// renormalized to sum to one.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    n: usize,
    entries: Vec<f64>,
    isotropic: bool,
}

impl KernelMatrix {
    pub fn new(kernel: &ScatteringKernel, ords: &OrdinateSet) -> Self {
        let n = ords.len();
        let mut entries = vec![0.0; n * n];
        for j in 0..n {
            let vj = ords.direction(j);
            let row = &mut entries[j * n..(j + 1) * n];
            for (k, r) in row.iter_mut().enumerate() {
                let vk = ords.direction(k);
                *r = ords.weights()[k] * kernel.evaluate(vj[0] * vk[0] + vj[1] * vk[1]);
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|r| *r /= sum);
        }
        Self {
            n,
            entries,
            isotropic: kernel.is_isotropic(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_isotropic(&self) -> bool {
        self.isotropic
    }

    pub fn entry(&self, j: usize, k: usize) -> f64 {
        self.entries[j * self.n + k]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    /// Applies the matrix to every cell of `u`.
    pub fn apply(&self, u: &AngularField) -> AngularField {
        let n_cells = u.n_cells();
        let mut out = AngularField::zeros(n_cells, self.n);
        for j in 0..self.n {
            let dst = out.ordinate_mut(j);
            for k in 0..self.n {
                let m = self.entries[j * self.n + k];
                for (d, s) in dst.iter_mut().zip(u.ordinate(k)) {
                    *d += m * s;
                }
            }
        }
        out
    }
}

/// Angular average `K_I u` with the normalized measure.
pub fn apply_k_i(ords: &OrdinateSet, u: &AngularField) -> Result<ScalarField> {
    check_len("K_I ordinate count", ords.len(), u.n_ords())?;
    Ok(k_i(ords, u))
}

pub(crate) fn k_i(ords: &OrdinateSet, u: &AngularField) -> ScalarField {
    let mut out = vec![0.0; u.n_cells()];
    for (k, w) in ords.weights().iter().enumerate() {
        for (o, v) in out.iter_mut().zip(u.ordinate(k)) {
            *o += w * v;
        }
    }
    ScalarField::new(out)
}

/// Scattering integral `K_Θ u`.
pub fn apply_k_theta(
    ords: &OrdinateSet,
    u: &AngularField,
    kernel: &ScatteringKernel,
) -> Result<AngularField> {
    check_len("K_Theta ordinate count", ords.len(), u.n_ords())?;
    Ok(KernelMatrix::new(kernel, ords).apply(u))
}

/// Direction of advection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    /// `+v·∇` with data on the inflow boundary.
    Forward,
    /// `-v·∇` with data on the outflow boundary.
    Adjoint,
}

#[derive(Debug, Clone)]
pub enum VolumeSource {
    None,
    Isotropic(ScalarField),
    Angular(AngularField),
}

/// One steady transport equation
///
/// ```text
/// ±v·∇u + σ_t u = σ_s K_Θ u + σ_iso K_I u + q
/// ```
///
/// `sigma_iso` is an optional extra isotropic gain used to write modified
/// kernels such as `σ_a K_I + σ_s K_Θ`.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub sigma_t: ScalarField,
    pub sigma_s: ScalarField,
    pub kernel: ScatteringKernel,
    pub sigma_iso: Option<ScalarField>,
    pub source: VolumeSource,
    pub inflow: Option<BoundarySource>,
    pub sense: Sense,
}

impl TransportProblem {
    pub fn new(sigma_t: ScalarField, sigma_s: ScalarField, kernel: ScatteringKernel) -> Self {
        Self {
            sigma_t,
            sigma_s,
            kernel,
            sigma_iso: None,
            source: VolumeSource::None,
            inflow: None,
            sense: Sense::Forward,
        }
    }

    pub fn with_source(mut self, source: VolumeSource) -> Self {
        self.source = source;
        self
    }

    pub fn with_inflow(mut self, inflow: BoundarySource) -> Self {
        self.inflow = Some(inflow);
        self
    }

    pub fn with_isotropic_gain(mut self, sigma_iso: ScalarField) -> Self {
        self.sigma_iso = Some(sigma_iso);
        self
    }

    pub fn adjoint(mut self) -> Self {
        self.sense = Sense::Adjoint;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SourceIteration,
    Krylov,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub scheme: Scheme,
    /// Relative tolerance. Source iteration: estimated max-norm error over
    /// the max norm of the iterate. Krylov: residual reduction.
    pub tol: f64,
    pub max_iters: usize,
    /// GMRES restart length.
    pub restart: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::SourceIteration,
            tol: 1e-10,
            max_iters: 5000,
            restart: 60,
        }
    }
}

impl SolverOptions {
    pub fn krylov(tol: f64) -> Self {
        Self {
            scheme: Scheme::Krylov,
            tol,
            max_iters: 2000,
            restart: 60,
        }
    }

    pub fn source_iteration(tol: f64) -> Self {
        Self {
            scheme: Scheme::SourceIteration,
            tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("solver tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Source iteration: max-norm of the last update. Krylov: relative
    /// residual of the fixed-point system.
    pub final_residual: f64,
    pub converged: bool,
    #[serde(skip)]
    pub residual_history: Vec<f64>,
}

impl SolveReport {
    fn trivial() -> Self {
        Self {
            iterations: 0,
            final_residual: 0.0,
            converged: true,
            residual_history: Vec::new(),
        }
    }

    /// Turns a non-converged report into an error.
    pub fn ensure(&self, what: &str) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged {
                what: what.to_string(),
                iterations: self.iterations,
                residual: self.final_residual,
            })
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Upwind {
    Cell(u32),
    Edge(u32),
}

/// Sweep schedule and upwind stencil for one ordinate.
#[derive(Debug, Clone)]
struct SweepPlan {
    order: Vec<u32>,
    outflow: Vec<f64>,
    offsets: Vec<u32>,
    upwind: Vec<(Upwind, f64)>,
}

impl SweepPlan {
    fn build(mesh: &Mesh, v: [f64; 2]) -> Result<Self> {
        let n = mesh.n_cells();
        let mut outflow = vec![0.0; n];
        let mut offsets = Vec::with_capacity(n + 1);
        let mut upwind = Vec::with_capacity(2 * n);
        let mut indegree = vec![0u32; n];
        let mut downstream: Vec<Vec<u32>> = vec![Vec::new(); n];
        offsets.push(0);
        for c in 0..n {
            for f in mesh.faces(c) {
                let vn = f.normal[0] * v[0] + f.normal[1] * v[1];
                if vn > GRAZING_EPS {
                    outflow[c] += vn * f.length;
                } else if vn < -GRAZING_EPS {
                    let coef = -vn * f.length;
                    match f.neighbor {
                        FaceNeighbor::Cell(nb) => {
                            upwind.push((Upwind::Cell(nb as u32), coef));
                            indegree[c] += 1;
                            downstream[nb].push(c as u32);
                        }
                        FaceNeighbor::Boundary(e) => upwind.push((Upwind::Edge(e as u32), coef)),
                    }
                }
            }
            offsets.push(upwind.len() as u32);
        }

        // Kahn's algorithm, seeded in cell order for determinism.
        let mut order = Vec::with_capacity(n);
        let mut stack: Vec<u32> = (0..n as u32).rev().filter(|&c| indegree[c as usize] == 0).collect();
        while let Some(c) = stack.pop() {
            order.push(c);
            for &d in downstream[c as usize].iter().rev() {
                indegree[d as usize] -= 1;
                if indegree[d as usize] == 0 {
                    stack.push(d);
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidArgument(format!(
                "upwind graph for direction ({:.3}, {:.3}) has a cycle",
                v[0], v[1]
            )));
        }
        Ok(Self {
            order,
            outflow,
            offsets,
            upwind,
        })
    }
}

/// Mesh, ordinates and precomputed sweep plans; shared by every solve on the
/// same grid.
#[derive(Debug, Clone)]
pub struct Discretization {
    mesh: Mesh,
    ords: OrdinateSet,
    plans: Vec<SweepPlan>,
}

impl Discretization {
    pub fn new(mesh: Mesh, ords: OrdinateSet) -> Result<Self> {
        let plans = ords
            .directions()
            .iter()
            .map(|&v| SweepPlan::build(&mesh, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mesh, ords, plans })
    }

    pub fn build(n_per_side: usize, n_dirs: usize) -> Result<Self> {
        Self::new(
            crate::grid::build_mesh(n_per_side)?,
            crate::grid::build_ordinates(n_dirs)?,
        )
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn ordinates(&self) -> &OrdinateSet {
        &self.ords
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }

    pub fn n_ords(&self) -> usize {
        self.ords.len()
    }

    pub fn zeros_angular(&self) -> AngularField {
        AngularField::zeros(self.n_cells(), self.n_ords())
    }

    pub fn k_i(&self, u: &AngularField) -> ScalarField {
        k_i(&self.ords, u)
    }

    pub fn replicate(&self, f: &ScalarField) -> AngularField {
        AngularField::replicate(f, self.n_ords())
    }

    /// Inverts the streaming-plus-attenuation operator once:
    /// `±v·∇u + σ_t u = iso + ang` with the given boundary data.
    pub fn sweep(
        &self,
        sigma_t: &[f64],
        iso: Option<&[f64]>,
        ang: Option<&AngularField>,
        inflow: Option<&BoundarySource>,
        sense: Sense,
    ) -> AngularField {
        let n = self.n_cells();
        let areas = self.mesh.cell_areas();
        let mut out = self.zeros_angular();
        let mut src = vec![0.0; n];
        for k in 0..self.n_ords() {
            let plan = match sense {
                Sense::Forward => &self.plans[k],
                Sense::Adjoint => &self.plans[self.ords.opposite(k)],
            };
            src.iter_mut().for_each(|s| *s = 0.0);
            if let Some(iso) = iso {
                src.copy_from_slice(iso);
            }
            if let Some(ang) = ang {
                for (s, a) in src.iter_mut().zip(ang.ordinate(k)) {
                    *s += a;
                }
            }
            let dst = out.ordinate_mut(k);
            for &c in &plan.order {
                let c = c as usize;
                let mut rhs = areas[c] * src[c];
                for &(up, coef) in &plan.upwind[plan.offsets[c] as usize..plan.offsets[c + 1] as usize] {
                    rhs += coef
                        * match up {
                            Upwind::Cell(nb) => dst[nb as usize],
                            Upwind::Edge(e) => inflow.map_or(0.0, |g| g.get(e as usize, k)),
                        };
                }
                dst[c] = rhs / (plan.outflow[c] + sigma_t[c] * areas[c]);
            }
        }
        out
    }

    fn validate(&self, p: &TransportProblem) -> Result<()> {
        let n = self.n_cells();
        check_len("sigma_t", n, p.sigma_t.len())?;
        check_len("sigma_s", n, p.sigma_s.len())?;
        if let Some(iso) = &p.sigma_iso {
            check_len("sigma_iso", n, iso.len())?;
        }
        match &p.source {
            VolumeSource::None => {}
            VolumeSource::Isotropic(q) => check_len("isotropic source", n, q.len())?,
            VolumeSource::Angular(q) => {
                check_len("angular source cells", n, q.n_cells())?;
                check_len("angular source ordinates", self.n_ords(), q.n_ords())?;
            }
        }
        if let Some(g) = &p.inflow {
            check_len("boundary source edges", self.mesh.n_boundary_edges(), g.n_edges())?;
            check_len("boundary source ordinates", self.n_ords(), g.n_ords())?;
        }
        for c in 0..n {
            let st = p.sigma_t.values()[c];
            let ss = p.sigma_s.values()[c];
            let si = p.sigma_iso.as_ref().map_or(0.0, |f| f.values()[c]);
            if !st.is_finite() || !ss.is_finite() || !si.is_finite() {
                return Err(Error::CoefficientBounds(format!("non-finite coefficient in cell {c}")));
            }
            if ss < 0.0 || si < 0.0 {
                return Err(Error::CoefficientBounds(format!(
                    "negative scattering coefficient in cell {c}"
                )));
            }
            if st < ss + si - 1e-12 * st.abs().max(1.0) {
                return Err(Error::CoefficientBounds(format!(
                    "total attenuation {st} below scattering {} in cell {c}",
                    ss + si
                )));
            }
        }
        Ok(())
    }

    /// Solves one transport problem.
    pub fn solve(&self, p: &TransportProblem, opts: &SolverOptions) -> Result<(AngularField, SolveReport)> {
        opts.validate()?;
        self.validate(p)?;
        let kernel = KernelMatrix::new(&p.kernel, &self.ords);
        let (q_iso, q_ang) = match &p.source {
            VolumeSource::None => (None, None),
            VolumeSource::Isotropic(q) => (Some(q.values()), None),
            VolumeSource::Angular(q) => (None, Some(q)),
        };
        let has_data = q_iso.is_some_and(|q| q.iter().any(|&v| v != 0.0))
            || q_ang.is_some_and(|q| q.values().iter().any(|&v| v != 0.0))
            || p.inflow.as_ref().is_some_and(|g| g.max_abs() > 0.0);
        if !has_data {
            return Ok((self.zeros_angular(), SolveReport::trivial()));
        }
        let scatters = p.sigma_s.values().iter().any(|&s| s != 0.0)
            || p.sigma_iso.as_ref().is_some_and(|f| f.values().iter().any(|&s| s != 0.0));
        if !scatters {
            let u = self.sweep(p.sigma_t.values(), q_iso, q_ang, p.inflow.as_ref(), p.sense);
            return Ok((u, SolveReport { iterations: 1, ..SolveReport::trivial() }));
        }
        match opts.scheme {
            Scheme::SourceIteration => self.source_iteration(p, &kernel, q_iso, q_ang, opts),
            Scheme::Krylov => self.krylov(p, &kernel, q_iso, q_ang, opts),
        }
    }

    /// Total in-scattering source for the current iterate, split into an
    /// isotropic and an angular part.
    fn scattering_source(
        &self,
        p: &TransportProblem,
        kernel: &KernelMatrix,
        u: &AngularField,
    ) -> (Vec<f64>, Option<AngularField>) {
        let phi = self.k_i(u);
        let mut iso = vec![0.0; self.n_cells()];
        if let Some(si) = &p.sigma_iso {
            for ((o, s), f) in iso.iter_mut().zip(si.values()).zip(phi.values()) {
                *o += s * f;
            }
        }
        if kernel.is_isotropic() {
            for ((o, s), f) in iso.iter_mut().zip(p.sigma_s.values()).zip(phi.values()) {
                *o += s * f;
            }
            (iso, None)
        } else {
            (iso, Some(kernel.apply(u).mul_scalar_field(&p.sigma_s)))
        }
    }

    fn source_iteration(
        &self,
        p: &TransportProblem,
        kernel: &KernelMatrix,
        q_iso: Option<&[f64]>,
        q_ang: Option<&AngularField>,
        opts: &SolverOptions,
    ) -> Result<(AngularField, SolveReport)> {
        let mut u = self.zeros_angular();
        let mut history = Vec::new();
        for it in 1..=opts.max_iters {
            let (mut iso, mut ang) = self.scattering_source(p, kernel, &u);
            if let Some(q) = q_iso {
                iso.iter_mut().zip(q).for_each(|(a, b)| *a += b);
            }
            if let Some(q) = q_ang {
                match ang.as_mut() {
                    Some(a) => a.values_mut().iter_mut().zip(q.values()).for_each(|(x, y)| *x += y),
                    None => ang = Some(q.clone()),
                }
            }
            let next = self.sweep(p.sigma_t.values(), Some(&iso), ang.as_ref(), p.inflow.as_ref(), p.sense);
            let diff = next
                .values()
                .iter()
                .zip(u.values())
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            u = next;
            if !diff.is_finite() {
                return Err(Error::Diverged("source iteration produced non-finite values".into()));
            }
            // Error estimate diff·ρ/(1-ρ) with ρ the observed contraction of
            // successive updates, relative to the current max norm.
            let scale = u.max_abs();
            let estimate = match history.last() {
                _ if diff == 0.0 => 0.0,
                Some(&prev) if prev > 0.0 && diff < prev => {
                    let rho = diff / prev;
                    diff * rho / (1.0 - rho)
                }
                _ => f64::INFINITY,
            };
            history.push(diff);
            if estimate <= opts.tol * scale {
                return Ok((
                    u,
                    SolveReport {
                        iterations: it,
                        final_residual: diff,
                        converged: true,
                        residual_history: history,
                    },
                ));
            }
        }
        let last = history.last().copied().unwrap_or(f64::INFINITY);
        Ok((
            u,
            SolveReport {
                iterations: opts.max_iters,
                final_residual: last,
                converged: false,
                residual_history: history,
            },
        ))
    }

    fn krylov(
        &self,
        p: &TransportProblem,
        kernel: &KernelMatrix,
        q_iso: Option<&[f64]>,
        q_ang: Option<&AngularField>,
        opts: &SolverOptions,
    ) -> Result<(AngularField, SolveReport)> {
        let sigma_t = p.sigma_t.values();
        let uncollided = self.sweep(sigma_t, q_iso, q_ang, p.inflow.as_ref(), p.sense);

        if kernel.is_isotropic() {
            // Unknown is the scalar flux; the angular field follows from one
            // more sweep.
            let gain: Vec<f64> = match &p.sigma_iso {
                Some(si) => p.sigma_s.values().iter().zip(si.values()).map(|(a, b)| a + b).collect(),
                None => p.sigma_s.values().to_vec(),
            };
            let rhs = self.k_i(&uncollided).into_values();
            let mut phi = rhs.clone();
            let report = gmres(
                |x| {
                    let iso: Vec<f64> = gain.iter().zip(x).map(|(g, v)| g * v).collect();
                    let swept = self.sweep(sigma_t, Some(&iso), None, None, p.sense);
                    let avg = self.k_i(&swept);
                    x.iter().zip(avg.values()).map(|(a, b)| a - b).collect()
                },
                &rhs,
                &mut phi,
                opts.tol,
                opts.restart,
                opts.max_iters,
            );
            let mut iso: Vec<f64> = gain.iter().zip(&phi).map(|(g, v)| g * v).collect();
            if let Some(q) = q_iso {
                iso.iter_mut().zip(q).for_each(|(a, b)| *a += b);
            }
            let u = self.sweep(sigma_t, Some(&iso), q_ang, p.inflow.as_ref(), p.sense);
            return Ok((u, krylov_report(report)));
        }

        let rhs = uncollided.into_values();
        let mut x = rhs.clone();
        let (nc, no) = (self.n_cells(), self.n_ords());
        let report = gmres(
            |x| {
                let field = AngularField::from_values(nc, no, x.to_vec()).expect("shape");
                let (iso, ang) = self.scattering_source(p, kernel, &field);
                let swept = self.sweep(sigma_t, Some(&iso), ang.as_ref(), None, p.sense);
                x.iter().zip(swept.values()).map(|(a, b)| a - b).collect()
            },
            &rhs,
            &mut x,
            opts.tol,
            opts.restart,
            opts.max_iters,
        );
        let u = AngularField::from_values(nc, no, x)?;
        Ok((u, krylov_report(report)))
    }
}

fn krylov_report(r: crate::krylov::GmresReport) -> SolveReport {
    SolveReport {
        iterations: r.iterations,
        final_residual: r.relative_residual,
        converged: r.converged,
        residual_history: Vec::new(),
    }
}

/// Forward transport solve.
pub fn solve_rte(
    disc: &Discretization,
    problem: &TransportProblem,
    opts: &SolverOptions,
) -> Result<(AngularField, SolveReport)> {
    let mut p = problem.clone();
    p.sense = Sense::Forward;
    disc.solve(&p, opts)
}

/// Adjoint transport solve: `-v·∇` with data prescribed on the outflow
/// boundary.
pub fn solve_adjoint_rte(
    disc: &Discretization,
    problem: &TransportProblem,
    opts: &SolverOptions,
) -> Result<(AngularField, SolveReport)> {
    let mut p = problem.clone();
    p.sense = Sense::Adjoint;
    disc.solve(&p, opts)
}

/// True when every boundary pair carrying data for the given sense is an
/// inflow pair of that sense.
pub fn boundary_support_matches(disc: &Discretization, g: &BoundarySource, sense: Sense) -> bool {
    let mesh = disc.mesh();
    let ords = disc.ordinates();
    mesh.boundary_edges().iter().enumerate().all(|(e, edge)| {
        (0..ords.len()).all(|k| {
            let v = ords.direction(k);
            let v = if sense == Sense::Forward { v } else { [-v[0], -v[1]] };
            g.get(e, k) == 0.0 || classify(edge.normal, v) == Flow::Inflow
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_mesh, build_ordinates, inner_phase};
    use approx::assert_relative_eq;

    fn disc(n: usize, d: usize) -> Discretization {
        Discretization::new(build_mesh(n).unwrap(), build_ordinates(d).unwrap()).unwrap()
    }

    #[test]
    fn k_i_of_constant_and_odd_fields() {
        let d = disc(3, 16);
        let c = AngularField::from_fn(d.n_cells(), 16, |_, _| 2.5);
        assert!(d.k_i(&c).values().iter().all(|&v| (v - 2.5).abs() < 1e-14));
        let ords = d.ordinates().clone();
        let odd = AngularField::from_fn(d.n_cells(), 16, |_, k| ords.direction(k)[0]);
        assert!(apply_k_i(&ords, &odd).unwrap().values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn k_i_rejects_shape_mismatch() {
        let ords = build_ordinates(8).unwrap();
        let u = AngularField::zeros(4, 16);
        assert!(apply_k_i(&ords, &u).is_err());
        assert!(apply_k_theta(&ords, &u, &ScatteringKernel::Isotropic).is_err());
    }

    #[test]
    fn kernel_rows_normalized_and_symmetric() {
        let ords = build_ordinates(64).unwrap();
        for g in [0.0, 0.5, 0.9, -0.3] {
            let m = KernelMatrix::new(&ScatteringKernel::henyey_greenstein(g).unwrap(), &ords);
            for s in m.row_sums() {
                assert!((s - 1.0).abs() < 1e-10);
            }
            for j in 0..64 {
                for k in 0..64 {
                    assert!((m.entry(j, k) - m.entry(k, j)).abs() < 1e-14);
                    assert!(m.entry(j, k) > 0.0);
                }
            }
        }
        assert!(ScatteringKernel::henyey_greenstein(1.0).is_err());
    }

    #[test]
    fn k_theta_isotropic_and_hg_zero_agree() {
        let d = disc(3, 16);
        let u = AngularField::from_fn(d.n_cells(), 16, |c, k| (c as f64 * 0.37 + k as f64 * 1.3).sin());
        let iso = apply_k_theta(d.ordinates(), &u, &ScatteringKernel::Isotropic).unwrap();
        let hg0 = apply_k_theta(d.ordinates(), &u, &ScatteringKernel::HenyeyGreenstein { g: 0.0 }).unwrap();
        let avg = d.k_i(&u);
        for k in 0..16 {
            for c in 0..d.n_cells() {
                assert_relative_eq!(iso.get(c, k), avg.values()[c], epsilon = 1e-13);
                assert_relative_eq!(hg0.get(c, k), avg.values()[c], epsilon = 1e-13);
            }
        }
        let hg = ScatteringKernel::henyey_greenstein(0.7).unwrap();
        let ones = AngularField::from_fn(d.n_cells(), 16, |_, _| 3.0);
        let out = apply_k_theta(d.ordinates(), &ones, &hg).unwrap();
        assert!(out.values().iter().all(|&v| (v - 3.0).abs() < 1e-13));
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let d = disc(4, 8);
        let n = d.n_cells();
        let p = TransportProblem::new(ScalarField::constant(n, 2.0), ScalarField::constant(n, 1.0), ScatteringKernel::Isotropic);
        let (u, rep) = solve_rte(&d, &p, &SolverOptions::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(u.max_abs(), 0.0);
        let (w, _) = solve_adjoint_rte(&d, &p, &SolverOptions::default()).unwrap();
        assert_eq!(w.max_abs(), 0.0);
    }

    #[test]
    fn rejects_scattering_above_total() {
        let d = disc(3, 8);
        let n = d.n_cells();
        let p = TransportProblem::new(ScalarField::constant(n, 1.0), ScalarField::constant(n, 2.0), ScatteringKernel::Isotropic)
            .with_source(VolumeSource::Isotropic(ScalarField::constant(n, 1.0)));
        assert!(matches!(solve_rte(&d, &p, &SolverOptions::default()), Err(Error::CoefficientBounds(_))));
        let bad = SolverOptions { tol: 0.0, ..SolverOptions::default() };
        let ok = TransportProblem::new(ScalarField::constant(n, 1.0), ScalarField::zeros(n), ScatteringKernel::Isotropic);
        assert!(solve_rte(&d, &ok, &bad).is_err());
    }

    #[test]
    fn source_iteration_and_krylov_agree() {
        let d = disc(6, 16);
        let n = d.n_cells();
        let sigma_s = d.mesh().sample(|x, y| 1.0 + 0.5 * (x * y).sin());
        let sigma_t = sigma_s.map(|s| s + 0.2);
        for kernel in [ScatteringKernel::Isotropic, ScatteringKernel::HenyeyGreenstein { g: 0.6 }] {
            let p = TransportProblem::new(sigma_t.clone(), sigma_s.clone(), kernel)
                .with_inflow(BoundarySource::uniform(d.mesh(), d.ordinates(), 1.0))
                .with_source(VolumeSource::Isotropic(ScalarField::constant(n, 0.3)));
            let (a, ra) = solve_rte(&d, &p, &SolverOptions::source_iteration(1e-12)).unwrap();
            let (b, rb) = solve_rte(&d, &p, &SolverOptions::krylov(1e-12)).unwrap();
            assert!(ra.converged && rb.converged);
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn nonnegative_data_gives_nonnegative_solution() {
        let d = disc(5, 16);
        let sigma_s = d.mesh().sample(|x, _| 1.0 + x.abs());
        let p = TransportProblem::new(sigma_s.map(|s| s + 0.1), sigma_s, ScatteringKernel::HenyeyGreenstein { g: 0.8 })
            .with_inflow(BoundarySource::side(d.mesh(), d.ordinates(), crate::grid::Side::Bottom, 1.0));
        let (u, _) = solve_rte(&d, &p, &SolverOptions::default()).unwrap();
        assert!(u.min() >= 0.0);
    }

    #[test]
    fn adjoint_identity_small() {
        let d = disc(4, 8);
        let n = d.n_cells();
        let sigma_s = d.mesh().sample(|x, y| 0.5 + 0.25 * (x + y));
        let base = TransportProblem::new(sigma_s.map(|s| s + 0.4), sigma_s, ScatteringKernel::HenyeyGreenstein { g: 0.3 });
        let f = AngularField::from_fn(n, 8, |c, k| ((c * 7 + k * 3) % 11) as f64 / 11.0);
        let g = AngularField::from_fn(n, 8, |c, k| ((c * 5 + k) % 13) as f64 / 13.0 - 0.3);
        let opts = SolverOptions::source_iteration(1e-13);
        let (sf, _) = solve_rte(&d, &base.clone().with_source(VolumeSource::Angular(f.clone())), &opts).unwrap();
        let (sg, _) = solve_adjoint_rte(&d, &base.with_source(VolumeSource::Angular(g.clone())), &opts).unwrap();
        let lhs = inner_phase(d.mesh(), d.ordinates(), &sf, &g);
        let rhs = inner_phase(d.mesh(), d.ordinates(), &f, &sg);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
    }
}
