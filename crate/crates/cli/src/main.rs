use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod render;
mod stage;

use commands::Dirs;
use config::PipelineConfig;
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "coherentflow",
    version,
    about = "Coherent motion detection and activity mining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and/or labelled activity clips.
    Synth(StageArgs),
    /// Thermal energy fields and coherent motion regions per TEF.
    Detect(StageArgs),
    /// Semantic regions from the detected coherent motions.
    Regions(StageArgs),
    /// Train and/or apply the activity classifier.
    Recognize(StageArgs),
    /// Group frames into activities and extract flow curves.
    Mine(StageArgs),
    /// PNG views of the stage outputs.
    Render(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn init_threads(cfg: &PipelineConfig) -> CliResult<()> {
    let n = match std::env::var("COHERENTFLOW_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    CliError::Validation(format!(
                        "COHERENTFLOW_THREADS={v:?} is not a positive integer"
                    ))
                })?,
        ),
        Err(_) => cfg.threads,
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let (args, stage): (&StageArgs, fn(&PipelineConfig, &Dirs) -> CliResult<()>) =
        match &cli.command {
            Command::Synth(a) => (a, commands::synth),
            Command::Detect(a) => (a, commands::detect),
            Command::Regions(a) => (a, commands::regions),
            Command::Recognize(a) => (a, commands::recognize),
            Command::Mine(a) => (a, commands::mine),
            Command::Render(a) => (a, render::render),
        };
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    init_threads(&cfg)?;
    let dirs = Dirs {
        input: args.input.clone().or_else(|| cfg.input.clone()),
        output: args.out.clone().or_else(|| cfg.output.clone()),
    };
    stage(&cfg, &dirs)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
