//! Command-line front end: builds schedules, runs samplers against mixture
//! oracles, verifies the documented bounds, and emits plot-ready tables.
//!
//! Every command is a pure function of its config file and seed; reruns
//! produce byte-identical outputs. Input files are never written.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub mod cmd;
pub mod config;

pub use config::ExperimentConfig;

/// Failure classes, one per documented exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or unreadable/invalid input files. Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// A verify suite ran to completion and some check failed. Exit code 2.
    #[error("{0}")]
    Verification(String),
    /// The computation itself broke down. Exit code 3.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<pfode_core::Error> for CliError {
    fn from(e: pfode_core::Error) -> Self {
        CliError::Numerical(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "pfode",
    version,
    about = "Probability-flow ODE sampling experiments against analytic mixture oracles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build an adaptive timestep schedule and write it as JSON.
    Schedule {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Integrate trajectories over a schedule; write a trajectory CSV and a
    /// summary JSON.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Schedule JSON; defaults to <output dir>/schedule.json.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Run an invariant suite; exit 0 only when every check passes.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Which battery to run.
        #[arg(long)]
        suite: cmd::verify::Suite,
        /// Schedule JSON to audit instead of building one from the config.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Emit a plot-ready CSV.
    Analyze {
        /// Which table to produce.
        what: cmd::analyze::What,
        #[command(flatten)]
        common: CommonArgs,
        /// Schedule JSON; eta_profile reads it, defaults to
        /// <output dir>/schedule.json.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// List the bundled mixtures; with --out, write each one as JSON.
    Presets {
        /// Directory to write <name>.json files into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse arguments, honor PFODE_THREADS, dispatch, and map errors to the
/// documented exit codes.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match configure_threads().and_then(|()| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Schedule { common } => {
            let (cfg, dir) = ExperimentConfig::load(&common.config)?;
            let ctx = CommandContext::new(cfg, dir, common.out, common.seed);
            cmd::schedule::run(&ctx)
        }
        Command::Sample { common, schedule } => {
            let (cfg, dir) = ExperimentConfig::load(&common.config)?;
            let ctx = CommandContext::new(cfg, dir, common.out, common.seed);
            cmd::sample::run(&ctx, schedule.as_deref())
        }
        Command::Verify { common, suite, schedule } => {
            let (cfg, dir) = ExperimentConfig::load(&common.config)?;
            let ctx = CommandContext::new(cfg, dir, common.out, common.seed);
            cmd::verify::run(&ctx, suite, schedule.as_deref())
        }
        Command::Analyze { what, common, schedule } => {
            let (cfg, dir) = ExperimentConfig::load(&common.config)?;
            let ctx = CommandContext::new(cfg, dir, common.out, common.seed);
            cmd::analyze::run(&ctx, what, schedule.as_deref())
        }
        Command::Presets { out } => cmd::presets::run(out.as_deref()),
    }
}

/// Cap the global worker pool when PFODE_THREADS is set.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("PFODE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CliError::Usage(format!("PFODE_THREADS must be a positive integer, got {raw:?}"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))
}

/// Everything a subcommand needs: the validated config plus the resolved
/// seed and directories.
pub struct CommandContext {
    pub cfg: ExperimentConfig,
    /// Directory of the config file, for resolving relative input paths.
    pub config_dir: PathBuf,
    /// Resolved output directory (--out wins over the config).
    pub out_dir: PathBuf,
    /// Resolved seed (--seed wins over the config).
    pub seed: u64,
}

impl CommandContext {
    fn new(
        cfg: ExperimentConfig,
        config_dir: PathBuf,
        out: Option<PathBuf>,
        seed: Option<u64>,
    ) -> Self {
        let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
        let seed = seed.unwrap_or(cfg.seed);
        CommandContext { cfg, config_dir, out_dir, seed }
    }

    pub fn mixture(&self) -> Result<pfode_core::GaussianMixture> {
        config::load_mixture(&self.cfg.mixture_path(&self.config_dir))
    }

    /// Where `sample` and `analyze eta_profile` look for a schedule when no
    /// --schedule flag is given.
    pub fn default_schedule_path(&self) -> PathBuf {
        self.out_dir.join("schedule.json")
    }
}

/// Write one output file, creating the directory on demand.
pub fn write_output(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}
