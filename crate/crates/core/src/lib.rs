//! Reconstruction of fluorescence quantum efficiency and fluorophore
//! absorption from photoacoustic data generated by a coupled excitation and
//! emission transport system.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod direct;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod krylov;
pub mod landweber;
pub mod phantoms;
pub mod fpat;
pub mod rte;
pub mod varrecon;

pub use error::{Error, Result};
pub use grid::{
    build_mesh, build_ordinates, AngularField, BoundarySource, Mesh, OrdinateSet, ScalarField, Side,
};
pub use rte::{
    apply_k_i, apply_k_theta, solve_adjoint_rte, solve_rte, Discretization, ScatteringKernel, Scheme,
    SolveReport, SolverOptions, TransportProblem, VolumeSource,
};
pub use fpat::{
    compute_datum, compute_linearized_datum, solve_forward, solve_forward_many, solve_linearized, ForwardSolution,
    OpticalMedium,
};
pub use phantoms::{
    add_noise, build_phantom_fields, checkerboard_absorption, checkerboard_scattering, relative_l2_error, NoiseSpec,
    PhantomSpec,
};
pub use direct::{
    reconstruct_dsigma_linearized, reconstruct_dsigma_linearized_with_background, reconstruct_dsigma_zero_background,
    reconstruct_eta_direct, ReconResult,
};
pub use landweber::{
    back_substitute, landweber_solve, BlockOperator, CoefficientPair, LandweberHistory, LandweberOptions, LinearModel,
};
pub use varrecon::{
    default_beta, minimize, objective_gradient, objective_value, MinimizeOptions, MinimizeResult, ObjectiveSpec, Unknowns,
};
pub use config::RunConfig;
pub use experiment::{run_experiment, run_single, ExperimentReport, Metrics, Operation, RunMetrics, Scenario};
