//! Command-line driver for the multi-study decoding pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msdecode::experiment::{run_experiment, ExperimentConfig, Stage};
use msdecode::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "msdecode", version, about = "Multi-study decoding of statistical maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and unlabeled samples.
    Gen(Common),
    /// Learn (or import) the dictionary.
    Dict(Common),
    /// Fit per-study voxel decoders on every split.
    FitBaseline(Common),
    /// Train the multi-study ensemble on every split.
    Fit(Common),
    /// Train the weight-decay factored variant over its grid.
    FitL2(Common),
    /// Combine ensemble runs into consensus models.
    Consensus(Common),
    /// Score all fitted models on the held-out subjects.
    Eval(Common),
    /// Network maps, rankings and clustering of classification maps.
    Analyze(Common),
    /// All stages in order.
    Run(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn run(stages: &[Stage], common: &Common) -> msdecode::Result<()> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = std::path::absolute(out).map_err(|e| Error::Config(format!("--out: {e}")))?;
    }
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let summary = run_experiment(&cfg, stages)?;
    if let Some(report) = summary.report {
        print!("{}", report.summary_text());
    }
    log::info!("{} artifacts written under {}", summary.artifacts.len(), cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stages, common): (Vec<Stage>, &Common) = match &cli.command {
        Command::Gen(c) => (vec![Stage::Gen], c),
        Command::Dict(c) => (vec![Stage::Dict], c),
        Command::FitBaseline(c) => (vec![Stage::FitBaseline], c),
        Command::Fit(c) => (vec![Stage::Fit], c),
        Command::FitL2(c) => (vec![Stage::FitL2], c),
        Command::Consensus(c) => (vec![Stage::Consensus], c),
        Command::Eval(c) => (vec![Stage::Eval], c),
        Command::Analyze(c) => (vec![Stage::Analyze], c),
        Command::Run(c) => (Stage::ALL.to_vec(), c),
    };
    match run(&stages, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // stage errors already carry their cause in the message
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
