mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commands::{BenchmarkArgs, FitArgs, PredictArgs, SimulateArgs, TransformArgs};
use config::FileConfig;

/// Invalid flags or config values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "funclust", version, about = "Cluster multi-sensor functional data and select informative sensors")]
struct Cli {
    /// TOML file with default values for any long flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for grid points and replicates.
    #[arg(long, global = true, env = "FUNCLUST_THREADS")]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit per-sensor FPCA and write the coefficient matrix.
    Transform(TransformArgs),
    /// Search the penalized mixture over m, λ and γ.
    Fit(FitArgs),
    /// Assign new observations with a fitted model.
    Predict(PredictArgs),
    /// Draw a dataset from the simulation design.
    Simulate(SimulateArgs),
    /// Run a replicated simulation scenario.
    Benchmark(BenchmarkArgs),
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<funclust::Error>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        Some(funclust::Error::InvalidArgument(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let file = FileConfig::load(cli.config.as_deref())?;
    if let Some(threads) = cli.threads.or(file.threads) {
        if threads == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    match &cli.command {
        Command::Transform(args) => commands::transform(args, &file).map(|()| true),
        Command::Fit(args) => commands::fit(args, &file),
        Command::Predict(args) => commands::predict(args).map(|()| true),
        Command::Simulate(args) => commands::simulate(args, &file).map(|()| true),
        Command::Benchmark(args) => commands::benchmark(args, &file).map(|()| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERICAL),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
