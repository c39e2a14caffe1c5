//! Command line front end of the frequency-probing pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use freqprobe::experiment::{self, ExperimentConfig};
use freqprobe::Result;

#[derive(Parser)]
#[command(name = "freqprobe", version, about = "Probe, erase and score frequency information in patch forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write probe and erasure datasets.
    Gen(Common),
    /// Train the surrogate forecaster.
    Train(Common),
    /// Extract tap activations for every task dataset.
    Tap(Common),
    /// Run true and control probes for every (task, tap) pair.
    Probe(Common),
    /// Fit sequential erasers and score closed-loop generation.
    Erase(Common),
    /// Collect all outputs into summary.json.
    Report(Common),
}

fn run(cli: Cli) -> Result<()> {
    let (common, f): (Common, fn(&ExperimentConfig) -> Result<()>) = match cli.command {
        Command::Gen(c) => (c, |cfg| experiment::cmd_gen(cfg).map(drop)),
        Command::Train(c) => (c, |cfg| experiment::cmd_train(cfg).map(drop)),
        Command::Tap(c) => (c, experiment::cmd_tap),
        Command::Probe(c) => (c, |cfg| experiment::cmd_probe(cfg).map(drop)),
        Command::Erase(c) => (c, |cfg| experiment::cmd_erase(cfg).map(drop)),
        Command::Report(c) => (c, |cfg| experiment::cmd_report(cfg).map(drop)),
    };
    let cfg = ExperimentConfig::load(&common.config)?.resolve(common.seed, common.out)?;
    experiment::with_workers(|| f(&cfg))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
