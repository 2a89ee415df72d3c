//! Command-line front end.

pub mod config;
pub mod runner;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::benchmarks::{oracle, ORACLE_NAMES};
use crate::error::Error;
use config::{parse_config, RunConfig};
use runner::{run_checks, run_experiment, RunOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "expotwist",
    version,
    about = "Build and validate exponential twists of jump diffusions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipelines listed in a config file.
    Run {
        config: PathBuf,
        /// Output directory, overriding `run.output`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run only the invariant checks for a config file.
    Check {
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the closed-form values of a named benchmark.
    Oracle { name: String },
}

/// Exit code for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for runtime failures.
pub const EXIT_RUNTIME: i32 = 3;

fn load(path: &PathBuf) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

fn report(outcome: &RunOutcome) {
    let mut out = std::io::stdout().lock();
    for r in &outcome.rows {
        let _ = writeln!(
            out,
            "{:<40} {:>14.6e}  {}",
            r.check,
            r.value,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    for (p, e) in &outcome.errors {
        eprintln!("error in {p}: {e}");
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let checks_only = matches!(cli.command, Command::Check { .. });
    match cli.command {
        Command::Oracle { name } => match oracle(&name) {
            Some(values) => {
                let mut out = std::io::stdout().lock();
                for (k, v) in values {
                    let _ = writeln!(out, "{k},{}", crate::report::fmt_f64(v));
                }
                0
            }
            None => {
                eprintln!(
                    "unknown benchmark `{name}`; known: {}",
                    ORACLE_NAMES.join(", ")
                );
                EXIT_CONFIG
            }
        },
        Command::Run { config, output } | Command::Check { config, output } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return if matches!(e, Error::Io { .. }) {
                        EXIT_RUNTIME
                    } else {
                        EXIT_CONFIG
                    };
                }
            };
            let out = output.unwrap_or_else(|| PathBuf::from(&cfg.run.output));
            let result = if checks_only {
                run_checks(&cfg, &out)
            } else {
                run_experiment(&cfg, &out)
            };
            match result {
                Ok(o) => {
                    report(&o);
                    o.exit_code()
                }
                Err(e) => {
                    eprintln!("{e}");
                    match e {
                        Error::Config(_) | Error::InvalidInput(_) => EXIT_CONFIG,
                        _ => EXIT_RUNTIME,
                    }
                }
            }
        }
    }
}
