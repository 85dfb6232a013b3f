//! Experiment driver for the continual-learning benchmark harness.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clbench_core::commands::{cmd_generate, cmd_report, cmd_run, cmd_selftest};
use clbench_core::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "clbench",
    version,
    about = "Continual-learning benchmark harness: scenario generation, strategy runs, reports"
)]
struct Cli {
    /// Print the full default configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the per-seed scenario files named by the config.
    Generate {
        /// Experiment config file (TOML unless --json).
        #[arg(long)]
        config: PathBuf,
        /// Parse the config file as JSON instead of TOML.
        #[arg(long)]
        json: bool,
    },
    /// Run the configured strategy over the generated scenarios.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Aggregate run records from one or more directories into summary.json
    /// and a plot-ready report.csv.
    Report {
        /// Output directory for the report files.
        #[arg(long)]
        out: PathBuf,
        /// Directories holding run_*.json records.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Execute the built-in verification oracles (BMU scan, gradient checks,
    /// SI quadratic probe).
    Selftest,
}

fn execute(cli: Cli) -> clbench_core::Result<()> {
    if cli.print_defaults {
        print!("{}", ExperimentConfig::defaults_toml());
        return Ok(());
    }
    match cli.command {
        None => Err(clbench_core::Error::Config(
            "no subcommand given; try --help or --print-defaults".into(),
        )),
        Some(Command::Generate { config, json }) => {
            let cfg = ExperimentConfig::load(&config, json)?;
            let written = cmd_generate(&cfg)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Some(Command::Run { config, json }) => {
            let cfg = ExperimentConfig::load(&config, json)?;
            let artifacts = cmd_run(&cfg)?;
            for a in artifacts {
                println!(
                    "seed {}: {} batches -> {}",
                    a.record.seed,
                    a.record.matrix.n_batches(),
                    a.csv_path.display()
                );
            }
            Ok(())
        }
        Some(Command::Report { out, dirs }) => {
            let (summary, csv) = cmd_report(&dirs, &out)?;
            println!("wrote {}", summary.display());
            println!("wrote {}", csv.display());
            Ok(())
        }
        Some(Command::Selftest) => {
            let report = cmd_selftest()?;
            for c in &report.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "pass" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if report.all_passed() {
                Ok(())
            } else {
                Err(clbench_core::Error::Numeric(
                    "selftest oracle failure".into(),
                ))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
