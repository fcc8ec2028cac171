//! Experiment harness behind the `cool` binary.

pub mod config;
pub mod output;
pub mod runs;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::{Experiment, ExperimentConfig};
use output::{ensure_dir, sha256_hex, write_json, Manifest, Versions};
use runs::RunContext;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECK: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("check failed: {}", .0.join("; "))]
    Check(Vec<String>),
    #[error("numerical failure: {0}")]
    Numerical(#[from] pulsecool::Error),
    #[error("cannot write output: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Check(_) => EXIT_CHECK,
            CliError::Numerical(_) | CliError::Output(_) => EXIT_NUMERICAL,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cool", version, about = "Pulse-shaped resonator cooling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config `output_path`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the reference swap pulses and optionally re-optimize.
    Swap(CommonArgs),
    /// Controlled vs sideband cooling over (γn_T, κ).
    Figure1(CommonArgs),
    /// One optimized pulse with its occupation trajectory.
    Figure2(CommonArgs),
    /// Effect of a thermal auxiliary.
    Naux(CommonArgs),
    /// One vs two auxiliaries.
    Twoaux(CommonArgs),
    /// Sideband reference curve only.
    Sideband(CommonArgs),
}

impl Command {
    pub fn parts(&self) -> (Experiment, &CommonArgs) {
        match self {
            Command::Swap(a) => (Experiment::Swap, a),
            Command::Figure1(a) => (Experiment::Figure1, a),
            Command::Figure2(a) => (Experiment::Figure2, a),
            Command::Naux(a) => (Experiment::NauxStudy, a),
            Command::Twoaux(a) => (Experiment::TwoAux, a),
            Command::Sideband(a) => (Experiment::Sideband, a),
        }
    }
}

/// Files written by one run, relative to the output directory.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
}

/// Load the config, run the experiment, write results and the manifest.
pub fn execute(command: &Command) -> Result<RunSummary, CliError> {
    let (experiment, args) = command.parts();
    let (cfg, bytes) = ExperimentConfig::load(&args.config)?;
    cfg.check_experiment(experiment)?;
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output_path.clone())
        .unwrap_or_else(|| PathBuf::from(format!("cool-{}", experiment.name())));
    let ctx = RunContext::new(&cfg, args.seed);
    run_and_write(experiment, &cfg, &bytes, &ctx, &out_dir)
}

/// Run `experiment` and write its artifacts into `out_dir`.
pub fn run_and_write(
    experiment: Experiment,
    cfg: &ExperimentConfig,
    config_bytes: &[u8],
    ctx: &RunContext,
    out_dir: &Path,
) -> Result<RunSummary, CliError> {
    let started = chrono::Utc::now().to_rfc3339();
    log::info!("running {} with seed {}", experiment.name(), ctx.seed);
    let dir = ensure_dir(out_dir)?;
    let mut outputs = Vec::new();
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    let emit_table = |name: &str, t: &output::Table, outputs: &mut Vec<String>| -> Result<(), CliError> {
        t.write(&dir.join(name))?;
        outputs.push(name.to_string());
        Ok(())
    };
    match experiment {
        Experiment::Swap => {
            let r = runs::run_swap(cfg, ctx)?;
            write_json(&dir.join("swap_report.json"), &r)?;
            outputs.push("swap_report.json".into());
            failures = r.failures();
            notes.push("reference swap couplings divided by 2π before use".into());
        }
        Experiment::Figure1 => {
            let r = runs::run_figure1(cfg, ctx)?;
            emit_table("figure1.csv", &r.best_table(), &mut outputs)?;
            emit_table("figure1_times.csv", &r.all_times_table(), &mut outputs)?;
            notes.push(sideband_note(&cfg.g_grid.unwrap_or_default()));
        }
        Experiment::Figure2 => {
            let r = runs::run_figure2(cfg, ctx)?;
            emit_table("figure2_pulse.csv", &r.pulse_table(), &mut outputs)?;
            emit_table("figure2_trajectory.csv", &r.trajectory_table(), &mut outputs)?;
            write_json(&dir.join("figure2_pulse.json"), &r.pulse)?;
            write_json(&dir.join("figure2.json"), &r)?;
            outputs.push("figure2_pulse.json".into());
            outputs.push("figure2.json".into());
            notes.push(sideband_note(&cfg.g_grid.unwrap_or_default()));
            failures = r.failures();
        }
        Experiment::NauxStudy => {
            let r = runs::run_naux_study(cfg, ctx)?;
            emit_table("naux.csv", &r.table(), &mut outputs)?;
            notes.push("auxiliaries start thermal at their bath occupation".into());
        }
        Experiment::TwoAux => {
            let r = runs::run_two_aux(cfg, ctx)?;
            emit_table("twoaux.csv", &r.table(), &mut outputs)?;
            notes.push("each auxiliary couples to the target only; two-auxiliary runs warm-start from the single-auxiliary optimum with the second channel at zero".into());
        }
        Experiment::Sideband => {
            let r = runs::run_sideband(cfg, ctx)?;
            emit_table("sideband.csv", &r.table(), &mut outputs)?;
            notes.push(sideband_note(&r.grid));
        }
    }
    let manifest = Manifest {
        experiment: experiment.name(),
        config_sha256: sha256_hex(config_bytes),
        config: serde_json::to_value(cfg).map_err(|e| CliError::Output(e.to_string()))?,
        seed: ctx.seed,
        jobs: rayon::current_num_threads(),
        versions: Versions::default(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        outputs: outputs.clone(),
        notes,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    if !failures.is_empty() {
        return Err(CliError::Check(failures));
    }
    Ok(RunSummary { out_dir: dir, outputs })
}

fn sideband_note(grid: &pulsecool::baselines::GGrid) -> String {
    format!(
        "sideband values are steady states of the constant-coupling dynamics, minimized over g in [{:e}, {:e}] ({} log-spaced points, golden-section refined)",
        grid.g_min, grid.g_max, grid.n_points
    )
}

/// Initialize logging from `COOL_LOG` (default `info`), to standard error.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("COOL_LOG", "info");
    let _ = env_logger::Builder::from_env(env).target(env_logger::Target::Stderr).try_init();
}
