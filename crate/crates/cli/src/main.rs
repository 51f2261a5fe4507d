//! `twotime`: run verification suites or emit theoretical limit laws.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twotime::experiment::{self, ExperimentError, RunOptions, EXIT_CONFIG_ERROR};

#[derive(Parser)]
#[command(name = "twotime", version, about = "Two-time-scale stochastic approximation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured problem and evaluate the requested suites.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Override the master seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Simulate even if the schedule violates the step-size conditions.
        #[arg(long)]
        allow_invalid_schedule: bool,
    },
    /// Write limits.json with the limit laws, without simulating.
    Reference {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Worker threads for the replica map (default: all hardware threads).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, String> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err("--threads must be at least 1".into());
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| e.to_string())?;
    Ok(pool.install(f))
}

fn fail(e: &ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            common,
            seed,
            allow_invalid_schedule,
        } => {
            let opts = RunOptions {
                seed,
                out: common.out,
                allow_invalid_schedule,
            };
            let result = match with_pool(common.threads, || experiment::run_experiment(&config, &opts)) {
                Ok(r) => r,
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(EXIT_CONFIG_ERROR as u8);
                }
            };
            match result {
                Ok(outcome) => {
                    for v in &outcome.report.verdicts {
                        println!(
                            "{} {} statistic={}",
                            if v.pass { "PASS" } else { "FAIL" },
                            v.name,
                            v.statistic
                        );
                    }
                    if let Some(reason) = &outcome.report.aborted {
                        eprintln!("aborted: {reason}");
                    }
                    println!("report: {}", outcome.out_dir.join("report.json").display());
                    ExitCode::from(outcome.exit_code as u8)
                }
                Err(e) => fail(&e),
            }
        }
        Command::Reference { config, common } => {
            match with_pool(common.threads, || experiment::emit_reference(&config, common.out.as_deref())) {
                Ok(Ok(path)) => {
                    println!("limits: {}", path.display());
                    ExitCode::SUCCESS
                }
                Ok(Err(e)) => fail(&e),
                Err(msg) => {
                    eprintln!("error: {msg}");
                    ExitCode::from(EXIT_CONFIG_ERROR as u8)
                }
            }
        }
    }
}
