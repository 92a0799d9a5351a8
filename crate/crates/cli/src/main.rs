//! `lifestyles`: run the pipeline stage by stage or all at once.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lifestyles::pipeline::{Pipeline, PipelineConfig, RunOptions, Stage};
use lifestyles::Error;

#[derive(Debug, Parser)]
#[command(name = "lifestyles", version, about = "Shopping and mobility lifestyle pipeline")]
struct Cli {
    /// JSON config with sections data, lda, geo, features, cmf, baselines, synth.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory holding one subdirectory per stage.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Rows per behavior and per class in the report tables.
    #[arg(long, global = true, default_value_t = 20)]
    top_k: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic logs, POI fixture and ground truth.
    Synth,
    /// Parse raw logs into visit and transaction count matrices.
    Ingest,
    /// Learn shopping behaviors on a training share of users and fold in the rest.
    LdaShopping,
    /// Triangulate towers, size crawl radii, fetch POIs and learn tower classes.
    Towers,
    /// Build the TF-IDF weighted user-by-class mobility matrix.
    Features,
    /// Fit the collective factorization.
    CmfFit,
    /// Cross-validate the factorization over the rank grid.
    CmfCv,
    /// Compare held-out RMSE with and without the mobility view.
    CompareViews,
    /// Raw-count lasso and classification baselines.
    Baselines,
    /// Top-weighted tokens per behavior and per tower class.
    Report,
    /// Every stage in order.
    All,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::Ingest => Stage::Ingest,
            Command::LdaShopping => Stage::LdaShopping,
            Command::Towers => Stage::Towers,
            Command::Features => Stage::Features,
            Command::CmfFit => Stage::CmfFit,
            Command::CmfCv => Stage::CmfCv,
            Command::CompareViews => Stage::CompareViews,
            Command::Baselines => Stage::Baselines,
            Command::Report => Stage::Report,
            Command::All => return None,
        })
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) => 1,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::from_path(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let pipeline = Pipeline::new(config, &cli.out)?;
    let options = RunOptions { top_k: cli.top_k };
    match cli.command.stage() {
        Some(stage) => {
            pipeline.run(stage, &options)?;
        }
        None => {
            pipeline.run_all(&options)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
