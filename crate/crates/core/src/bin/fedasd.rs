use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedasd::cli::{self, SweepAxis};
use fedasd::Error;

#[derive(Parser)]
#[command(
    name = "fedasd",
    version,
    about = "Federated learning simulator with adaptive self-distillation"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat an experiment over several values of one setting.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hessian top eigenvalue and trace of a saved model.
    Diagnose {
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
}

fn out_dir(flag: Option<PathBuf>, parsed: &cli::ParsedConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| parsed.experiment.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(3),
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn execute(args: Args) -> fedasd::Result<ExitCode> {
    cli::configure_workers()?;
    match args.command {
        Command::Run { config, out } => {
            let parsed = cli::parse_config(&config)?;
            let dir = out_dir(out, &parsed, "out");
            let outcome = cli::run_experiment(&parsed, &dir)?;
            println!(
                "{} rounds; test accuracy global {:.4}, all-client average {:.4}; results in {}",
                outcome.metrics.len(),
                outcome.final_acc_global,
                outcome.final_acc_allavg,
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            axis,
            values,
            repeats,
            out,
        } => {
            let parsed = cli::parse_config(&config)?;
            let dir = out_dir(out, &parsed, "sweep");
            let rows = cli::sweep(&parsed, axis, &values, repeats, &dir)?;
            println!("{}", cli::SWEEP_HEADER);
            let mut failed = false;
            for row in &rows {
                println!(
                    "{},{},{},{},{}",
                    row.value, row.final_acc_mean, row.final_acc_std, row.repeats_ok, row.repeats_failed
                );
                for e in &row.errors {
                    eprintln!("{axis}={}: {e}", row.value);
                    failed = true;
                }
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Diagnose { config, model } => {
            let parsed = cli::parse_config(&config)?;
            let report = cli::diagnose(&parsed, &model)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(ExitCode::SUCCESS)
        }
    }
}
