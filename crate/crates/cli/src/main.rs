use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use offdyn_cli::config::ExperimentConfig;
use offdyn_cli::pipeline::run_subcommand;

/// Off-dynamics trajectory-diffusion experiment driver.
#[derive(Parser)]
#[command(name = "offdyn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<String>,
    /// Dotted-path config overrides, e.g. --set env.target.kappa_grav=2.0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect source and target datasets and the score anchors.
    CollectData(CommonArgs),
    /// Train the source-domain trajectory diffusion model.
    TrainDiffusion(CommonArgs),
    /// Train the energy modules and the reward annotator.
    TrainEnergy(CommonArgs),
    /// Evaluate receding-horizon planning in the target environment.
    Plan(CommonArgs),
    /// Generate guided synthetic trajectories at the configured budget.
    Generate(CommonArgs),
    /// Two-stage filter of generated trajectories into a synthetic dataset.
    Filter(CommonArgs),
    /// Train the downstream IQL policy on the configured data arm.
    TrainPolicy(CommonArgs),
    /// Evaluate the trained policy in the target environment.
    Evaluate(CommonArgs),
    /// Summarize a run directory into a CSV table and plots.
    Report(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CollectData(_) => "collect-data",
            Command::TrainDiffusion(_) => "train-diffusion",
            Command::TrainEnergy(_) => "train-energy",
            Command::Plan(_) => "plan",
            Command::Generate(_) => "generate",
            Command::Filter(_) => "filter",
            Command::TrainPolicy(_) => "train-policy",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::CollectData(a)
            | Command::TrainDiffusion(a)
            | Command::TrainEnergy(a)
            | Command::Plan(a)
            | Command::Generate(a)
            | Command::Filter(a)
            | Command::TrainPolicy(a)
            | Command::Evaluate(a)
            | Command::Report(a) => a,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = cli.command.args();
    let config = match ExperimentConfig::load(
        &args.config,
        args.seed,
        args.out.as_deref(),
        &args.overrides,
    ) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run_subcommand(cli.command.name(), &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
