use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use osnn_cli::{run, ExperimentConfig, Task};

/// Optical subspace neural network experiments.
#[derive(Parser)]
#[command(name = "osnn", version)]
struct Cli {
    #[arg(value_enum)]
    task: Task,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path),
        None => ExperimentConfig::from_toml(&format!("task = \"{}\"", cli.task.name())),
    };
    let mut config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", e);
            return ExitCode::from(2);
        }
    };
    if config.task != cli.task {
        eprintln!(
            "error: config field `task`: config is for `{}`, command line asked for `{}`",
            config.task.name(),
            cli.task.name()
        );
        return ExitCode::from(2);
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    match run(&config) {
        Ok(summary) => {
            for path in &summary.artifacts {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
