//! `drcf`: staged car-following pipeline. Every subcommand reads and writes
//! artifacts under `<runs-dir>/<config name>/<stage>/`.

mod artifacts;
mod config;
mod stages;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::artifacts::Run;
use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    /// An upstream artifact does not exist yet.
    Missing { path: PathBuf, producer: String },
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Missing { path, producer } => {
                write!(f, "missing input {}; run `drcf {producer}` first", path.display())
            }
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Parser)]
#[command(name = "drcf", version, about = "Regime-aware car-following models: labeling, training and simulation")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// More log output (-v info from all crates, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults to the bundled demo.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root of the run directories.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Override a config value, e.g. `--set curriculum.stage1_epochs=3`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory corpus with ground-truth regimes.
    GenSynthetic(Common),
    /// Load trajectories, extract leader-follower pairs and split them.
    Ingest(Common),
    /// Piecewise-linear segmentation of follower speed profiles.
    Segment(Common),
    /// Time-warp alignment and the car-following/free-flow threshold.
    Align(Common),
    /// Per-timestep driving regime labels.
    Classify(Common),
    /// Fit IDM parameters with the genetic algorithm.
    CalibrateIdm(Common),
    /// Train the configured neural models.
    Train(Common),
    /// Closed-loop simulation on the test pairs.
    Simulate(Common),
    /// Platoon simulation on the configured scenario.
    Platoon(Common),
    /// Per-model error metrics of the closed-loop simulations.
    Evaluate(Common),
    /// Comparison tables; refuses artifacts from other configurations.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenSynthetic(c)
            | Command::Ingest(c)
            | Command::Segment(c)
            | Command::Align(c)
            | Command::Classify(c)
            | Command::CalibrateIdm(c)
            | Command::Train(c)
            | Command::Simulate(c)
            | Command::Platoon(c)
            | Command::Evaluate(c)
            | Command::Report(c) => c,
        }
    }
}

fn init_logging(quiet: bool, verbose: u8) {
    let filter = if quiet {
        "error"
    } else {
        match verbose {
            0 => "warn,drcf=info",
            1 => "info",
            _ => "debug",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(filter))
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let common = cli.command.common();
    let config = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let run = Run::new(&common.runs_dir, config);
    log::debug!("run {} config {}", run.root.display(), run.hash);
    match cli.command {
        Command::GenSynthetic(_) => stages::gen_synthetic(&run),
        Command::Ingest(_) => stages::ingest(&run),
        Command::Segment(_) => stages::segment(&run),
        Command::Align(_) => stages::align(&run),
        Command::Classify(_) => stages::classify(&run),
        Command::CalibrateIdm(_) => stages::calibrate(&run),
        Command::Train(_) => stages::train(&run),
        Command::Simulate(_) => stages::simulate(&run),
        Command::Platoon(_) => stages::platoon(&run),
        Command::Evaluate(_) => stages::evaluate(&run),
        Command::Report(_) => stages::report(&run),
    }
}

/// 2 configuration, 3 input data, 4 numeric, 5 internal.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => 2,
                CliError::Data(_) | CliError::Missing { .. } => 3,
                CliError::Internal(_) => 5,
            };
        }
        if let Some(e) = cause.downcast_ref::<drcf::Error>() {
            use drcf::Error::*;
            return match e {
                Config(_) | Argument(_) => 2,
                Parse { .. } | Schema(_) | Data(_) | Io(_) | Json(_) | Csv(_) => 3,
                Numeric(_) | Domain(_) => 4,
                Internal(_) => 5,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    5
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(cli.quiet, cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
