//! `dilution-lab`: synthetic cohorts, token geometry, attention dilution,
//! subtype clustering, CKA heatmaps and segmentation statistics from the
//! command line.

mod args;
mod commands;
mod output;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

/// Bad flags or configuration, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn thread_cap() -> anyhow::Result<Option<usize>> {
    let Ok(raw) = std::env::var("DILUTION_LAB_THREADS") else {
        return Ok(None);
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(usage(format!("DILUTION_LAB_THREADS must be a positive integer, got {raw:?}"))),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cap = thread_cap()?;
    #[cfg(feature = "parallel")]
    if let Some(n) = cap {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = commands::Context {
        execution: if cli.sequential {
            dilution_core::Execution::Sequential
        } else {
            dilution_core::Execution::Parallel
        },
        thread_cap: cap,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Geometry(a) => commands::geometry(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Adi(a) => commands::adi(&ctx, a),
        Command::Augment(a) => commands::augment(&ctx, a),
        Command::Cluster(a) => commands::cluster(&ctx, a),
        Command::Cka(a) => commands::cka(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Report(a) => report::run(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
        Err(_) => {
            eprintln!("internal error");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
