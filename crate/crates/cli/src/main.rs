mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dgad::autograd::PadMode;

use crate::config::{ExperimentConfig, Overrides, ScoreChoice};

#[derive(Parser, Debug)]
#[command(name = "dgad", version, about = "Train and evaluate one-class anomaly detectors")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Alternative to the subcommand.
    #[arg(long, value_enum, global = true)]
    phase: Option<Phase>,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Train one model per normal class.
    Train,
    /// Score the test split with trained models and write ROC results.
    Test,
    /// Train and evaluate every ablation variant.
    Ablate,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Train,
    Test,
    Ablate,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Padding {
    Symmetric,
    Zero,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Normal class to use (replaces the configured class list).
    #[arg(long, global = true)]
    test_object: Option<u32>,
    /// Pretext task: 1 rotation, 2 jigsaw, 3 jigsaw with per-quadrant rotation
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    protocol: Option<u8>,
    #[arg(long, value_enum, global = true)]
    padding: Option<Padding>,
    /// Append coordinate channels to every convolution input.
    #[arg(long, global = true)]
    coord: bool,
    /// Drop the compactness loss.
    #[arg(long, global = true)]
    no_compactness: bool,
    #[arg(long, value_enum, global = true)]
    score: Option<ScoreChoice>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; one `class_K` directory per trained model and `results/` for evaluation
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override the training length.
    #[arg(long, global = true)]
    iterations: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Continue training from the newest checkpoint of each class.
    #[arg(long, global = true)]
    resume: bool,
    /// Run ablation cells in parallel.
    #[arg(long, global = true)]
    parallel: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let command = match (cli.command, cli.phase) {
        (Some(c), None) => c,
        (None, Some(Phase::Train)) => Command::Train,
        (None, Some(Phase::Test)) => Command::Test,
        (None, Some(Phase::Ablate)) => Command::Ablate,
        (Some(c), Some(p)) => {
            let same = matches!(
                (c, p),
                (Command::Train, Phase::Train) | (Command::Test, Phase::Test) | (Command::Ablate, Phase::Ablate)
            );
            if !same {
                anyhow::bail!("subcommand {c:?} conflicts with --phase {p:?}");
            }
            c
        }
        (None, None) => anyhow::bail!("choose a command: train, test or ablate (or --phase)"),
    };
    let c = &cli.common;
    let base = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        test_object: c.test_object,
        protocol: c.protocol,
        padding: c.padding.map(|p| match p {
            Padding::Symmetric => PadMode::Symmetric,
            Padding::Zero => PadMode::Zero,
        }),
        coord: c.coord,
        no_compactness: c.no_compactness,
        score: c.score,
        seed: c.seed,
        run_dir: c.run_dir.clone(),
        iterations: c.iterations,
    };
    let mut cfg = base.apply(&overrides)?;
    if c.parallel {
        cfg.run.parallel = true;
    }
    let opts = commands::RunOptions {
        force: c.force,
        resume: c.resume,
    };
    match command {
        Command::Train => commands::train(&cfg, &opts),
        Command::Test => commands::test(&cfg, &opts),
        Command::Ablate => commands::ablate(&cfg, &opts),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
