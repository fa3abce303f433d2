use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use valuedist::experiment::{run_experiment, ExperimentConfig};

/// Posterior value-distribution experiments.
#[derive(Parser)]
#[command(name = "valuedist", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Write artifacts here instead of the configured directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { config } => match ExperimentConfig::load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                0
            }
            Err(e) => {
                eprintln!("{}: {e}", config.display());
                e.exit_code()
            }
        },
        Command::Run {
            config,
            seed_override,
            out,
        } => {
            let loaded = ExperimentConfig::load(&config).map(|c| c.with_overrides(seed_override, out));
            match loaded.and_then(|c| run_experiment(&c)) {
                Ok(report) if report.violations.is_empty() => {
                    println!("wrote {}", report.output_dir.display());
                    0
                }
                Ok(report) => {
                    for v in &report.violations {
                        eprintln!("invariant violated: {v}");
                    }
                    eprintln!("artifacts kept in {}", report.output_dir.display());
                    3
                }
                Err(e) => {
                    eprintln!("{}: {e}", config.display());
                    e.exit_code()
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
