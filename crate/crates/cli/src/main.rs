use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

mod artifacts;
mod config;
mod pipeline;

use config::{RunConfig, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    Simulate,
    GenCorpus,
    TrainCleirnet,
    TrainTdefsi,
    Forecast,
    Evaluate,
    Dependency,
    Select,
    SweepDelta,
    Report,
    /// Every stage listed under `stages` in the config.
    Run,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Simulate => Stage::Simulate,
            Command::GenCorpus => Stage::GenCorpus,
            Command::TrainCleirnet => Stage::TrainCleirnet,
            Command::TrainTdefsi => Stage::TrainTdefsi,
            Command::Forecast => Stage::Forecast,
            Command::Evaluate => Stage::Evaluate,
            Command::Dependency => Stage::Dependency,
            Command::Select => Stage::Select,
            Command::SweepDelta => Stage::SweepDelta,
            Command::Report => Stage::Report,
            Command::Run => return None,
        })
    }
}

/// County-level epidemic simulation, forecasting and evaluation.
#[derive(Debug, Parser)]
#[command(name = "epiforge", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory, overriding `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed, overriding `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let stages = match cli.command.stage() {
        Some(s) => vec![s],
        None => config.stages.clone(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build()?;
    let pipeline = pipeline::Pipeline::new(config);
    pool.install(|| stages.iter().try_for_each(|s| pipeline.run_stage(*s)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EPIFORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
