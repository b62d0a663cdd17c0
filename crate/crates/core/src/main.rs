//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration error, 2 run failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use analog_pipeline::config::{parse_config, serialize_config, ExperimentConfig};
use analog_pipeline::error::Error;
use analog_pipeline::experiment::{emit_plotdata, run_experiment};
use analog_pipeline::schedule::{async_event_stream, write_timeline_csv};

#[derive(Parser)]
#[command(
    name = "analog-pipeline",
    about = "Cycle-accurate simulator of pipeline training on analog in-memory accelerators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory for result files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the seed of every run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress per-run progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the [run] sections of a config file.
    Run { config: PathBuf },
    /// Execute everything in a config file ([run] and expanded [sweep]
    /// sections) and emit the speedup table and plot exports.
    Sweep { config: PathBuf },
    /// Parse and validate a config file, printing the resolved runs.
    Validate { config: PathBuf },
    /// Dump the asynchronous schedule for M stages and K data as CSV
    /// (cycle,stage,kind,datum) to stdout.
    Timeline { m: usize, k: usize },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = parse_config(config)?;
    if let Some(seed) = seed {
        for run in &mut cfg.runs {
            run.spec.run.seed = seed;
        }
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config } => {
            let mut cfg = load(&config, cli.seed)?;
            let sweeps = cfg.runs.iter().filter(|r| r.from_sweep.is_some()).count();
            if sweeps > 0 && !cli.quiet {
                eprintln!("note: ignoring {sweeps} sweep-expanded runs (use `sweep` to execute them)");
            }
            cfg.runs.retain(|r| r.from_sweep.is_none());
            if cfg.runs.is_empty() {
                return Err(Error::config("no [run] sections in config"));
            }
            let bundle = run_experiment(&cfg, &cli.out, cli.quiet)?;
            if !bundle.failures.is_empty() {
                return Err(Error::run(format!(
                    "{} of {} runs failed",
                    bundle.failures.len(),
                    bundle.failures.len() + bundle.reports.len()
                )));
            }
            Ok(())
        }
        Command::Sweep { config } => {
            let cfg = load(&config, cli.seed)?;
            let bundle = run_experiment(&cfg, &cli.out, cli.quiet)?;
            emit_plotdata(&bundle)?;
            if !bundle.failures.is_empty() {
                return Err(Error::run(format!(
                    "{} of {} runs failed",
                    bundle.failures.len(),
                    bundle.failures.len() + bundle.reports.len()
                )));
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load(&config, cli.seed)?;
            if !cli.quiet {
                print!("{}", serialize_config(&cfg));
            }
            println!("ok: {} runs", cfg.runs.len());
            Ok(())
        }
        Command::Timeline { m, k } => {
            if m < 1 || k < 1 {
                return Err(Error::config("timeline requires M >= 1 and K >= 1"));
            }
            let events = async_event_stream(m, k);
            write_timeline_csv(&events, std::io::stdout().lock())?;
            Ok(())
        }
    }
}
