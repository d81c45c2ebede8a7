//! `qfpat`: forward solves, single reconstructions and the numerical
//! studies, driven by a TOML run configuration.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 solver non-convergence.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qfpat_core::experiment::{noisy, RunOutcome, Scenario};
use qfpat_core::phantoms::build_phantom_fields;
use qfpat_core::{
    build_mesh, compute_datum, run_experiment, run_single, solve_forward_many, ExperimentReport, Mesh, Operation, RunConfig,
    ScalarField,
};
use serde_json::json;
use sha2::{Digest, Sha256};

use output::{angular_table, cell_table, Bundle};

#[derive(Parser)]
#[command(name = "qfpat", version, about = "Quantitative fluorescence photoacoustic tomography in the transport regime")]
struct Cli {
    /// TOML run configuration; defaults apply to every omitted key.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides `out` from the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve the coupled transport system and write the internal data.
    Forward,
    /// Direct quantum efficiency reconstruction.
    ReconEta,
    /// Linearized fluorophore absorption reconstruction.
    ReconSigmaLin,
    /// Landweber iteration on the linearized two-coefficient problem.
    ReconLandweber,
    /// Nonlinear least-squares reconstruction.
    ReconNonlinear,
    /// One of the four numerical studies over its noise ladder.
    Experiment {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        experiment: u8,
    },
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::ReconEta => "recon-eta",
            Command::ReconSigmaLin => "recon-sigma-lin",
            Command::ReconLandweber => "recon-landweber",
            Command::ReconNonlinear => "recon-nonlinear",
            Command::Experiment { .. } => "experiment",
        }
    }
}

/// Configuration failures, reported with exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.to_string_lossy().into_owned());
    }
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

/// The effective configuration without the output location, which does not
/// affect results.
fn portable(cfg: &RunConfig) -> RunConfig {
    RunConfig { out: None, ..cfg.clone() }
}

/// SHA-256 of the effective configuration in canonical JSON.
fn config_hash(cfg: &RunConfig) -> Result<String> {
    let canonical = serde_json::to_vec(&portable(cfg))?;
    Ok(Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect())
}

fn forward(cfg: &RunConfig, files: &mut Bundle) -> Result<serde_json::Value> {
    let sc = Scenario::from_config(cfg, None, None, None)?;
    let (disc, mesh) = (&sc.disc, sc.disc.mesh());
    let solutions = solve_forward_many(disc, &sc.truth, &sc.sources, &cfg.solver).context("forward solve")?;
    let many = solutions.len() > 1;
    let mut k_i_um = Vec::new();
    let mut data = Vec::new();
    for (j, fs) in solutions.iter().enumerate() {
        let name = if many { format!("u_x_{j}.csv") } else { "u_x.csv".into() };
        files.add(name, angular_table(disc.ordinates(), &fs.u_x));
        k_i_um.push(fs.k_i_um.clone());
        data.push(noisy(&compute_datum(&sc.truth, fs), cfg.noise.gamma, cfg.seed, j)?);
    }
    let names: Vec<String> = (0..solutions.len()).map(|j| format!("source_{j}")).collect();
    let table = |fields: &[ScalarField]| {
        let cols: Vec<(&str, &ScalarField)> = names.iter().map(String::as_str).zip(fields).collect();
        cell_table(mesh, &cols)
    };
    files.add("u_m_KI.csv", table(&k_i_um));
    files.add("H.csv", table(&data));
    let reports: Vec<_> = solutions
        .iter()
        .enumerate()
        .map(|(j, fs)| json!({ "source": j, "excitation": fs.report_x, "emission": fs.report_m }))
        .collect();
    Ok(json!({ "n_cells": disc.n_cells(), "n_ordinates": disc.n_ords(), "solver_reports": reports }))
}

/// Field, history and metrics files of one reconstruction under `prefix`.
fn add_run(cfg: &RunConfig, mesh: &Mesh, run: &RunOutcome, prefix: &Path, files: &mut Bundle) -> Result<()> {
    let (eta_true, sigma_true) = build_phantom_fields(&cfg.phantom, mesh)?;
    if let Some(eta) = &run.eta {
        files.add(prefix.join("eta.csv"), cell_table(mesh, &[("value", eta), ("truth", &eta_true)]));
    }
    if let Some(sigma) = &run.sigma {
        files.add(prefix.join("sigma.csv"), cell_table(mesh, &[("value", sigma), ("truth", &sigma_true)]));
    }
    if let Some(h) = &run.history {
        let mut csv = Vec::new();
        h.write_csv(&mut csv)?;
        files.add(prefix.join("history.csv"), csv);
    }
    Ok(())
}

fn report_files(cfg: &RunConfig, report: &ExperimentReport, nested: bool, files: &mut Bundle) -> Result<serde_json::Value> {
    let mesh = build_mesh(cfg.mesh.n_per_side)?;
    for run in &report.runs {
        let m = &run.metrics;
        let prefix = if nested { PathBuf::from(format!("{}_gamma{}", m.label, m.gamma)) } else { PathBuf::new() };
        add_run(cfg, &mesh, run, &prefix, files)?;
    }
    files.add("metrics.json", output::json(&report.metrics())?);
    let timings: Vec<_> = report
        .runs
        .iter()
        .map(|r| json!({ "label": r.metrics.label, "gamma": r.metrics.gamma, "wall_seconds": r.metrics.wall_seconds }))
        .collect();
    Ok(json!({ "n_cells": report.n_cells, "n_ordinates": report.n_ordinates, "runs": timings }))
}

fn execute(cli: &Cli) -> Result<PathBuf> {
    let cfg = load_config(cli)?;
    let out = PathBuf::from(cfg.out.clone().unwrap_or_else(|| "qfpat_out".into()));
    let start = Instant::now();
    let mut files = Bundle::default();
    let single = |op| -> Result<ExperimentReport> { run_single(&cfg, op).with_context(|| cli.command.name()) };
    let details = match cli.command {
        Command::Forward => forward(&cfg, &mut files)?,
        Command::ReconEta => report_files(&cfg, &single(Operation::EtaDirect)?, false, &mut files)?,
        Command::ReconSigmaLin => report_files(&cfg, &single(Operation::SigmaLinearized)?, false, &mut files)?,
        Command::ReconLandweber => report_files(&cfg, &single(Operation::Landweber)?, false, &mut files)?,
        Command::ReconNonlinear => report_files(&cfg, &single(Operation::Nonlinear)?, false, &mut files)?,
        Command::Experiment { experiment } => {
            let report = run_experiment(&cfg, experiment).with_context(|| format!("experiment {experiment}"))?;
            report_files(&cfg, &report, true, &mut files)?
        }
    };
    let meta = json!({
        "command": cli.command.name(),
        "config_sha256": config_hash(&cfg)?,
        "seed": cfg.seed,
        "details": details,
        "wall_seconds": start.elapsed().as_secs_f64(),
    });
    files.add("meta.json", output::json(&meta)?);
    files.add("config.toml", toml::to_string(&portable(&cfg)).context("serializing configuration")?);
    files.write_to(&out)?;
    for p in files.paths() {
        eprintln!("wrote {}", out.join(p).display());
    }
    Ok(out)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use qfpat_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 2,
                E::NotConverged { .. } | E::Diverged(_) | E::LineSearch(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
