use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use pixelflow::run::{run, Command, RunSpec};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    /// Write train/val/test event directories.
    GenData,
    /// Fit the coarse backbone alone.
    Pretrain,
    /// Joint training of backbone, conditioner and residual generator.
    Train,
    /// Coarse and refined forecasts of the test windows.
    Forecast,
    /// Scores of a forecast directory.
    Evaluate,
    /// Per-forecast latency at batch size 1.
    Bench,
    /// Scores over sampler step counts.
    AblateSteps,
    /// Scores of noise-free vs accumulated extraction.
    AblateExtraction,
    /// Lead-time and loss curves with CSV twins.
    Plot,
}

/// Radar nowcasting: a coarse deterministic forecast refined by a one-step
/// mean-flow residual generator.
#[derive(Debug, Parser)]
#[command(name = "pixelflowcast", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML run configuration; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Data seed for gen-data, training seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Pretrain => Command::Pretrain,
        Cmd::Train => Command::Train,
        Cmd::Forecast => Command::Forecast,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Bench => Command::Bench,
        Cmd::AblateSteps => Command::AblateSteps,
        Cmd::AblateExtraction => Command::AblateExtraction,
        Cmd::Plot => Command::Plot,
    };
    let spec = RunSpec { command, config: cli.config, overrides: cli.overrides, out: cli.out, seed: cli.seed, force: cli.force };
    match run(&spec) {
        Ok(m) => {
            println!("{}", spec.out.display());
            for a in m.artifacts {
                println!("  {a}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
