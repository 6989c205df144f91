use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use wavectl::{execute, Command, Invocation};

/// Carleman-weighted boundary control of linear and semilinear wave equations.
#[derive(Parser, Debug)]
#[command(name = "wavectl", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// INI run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Seed for sampling commands (overrides solver.seed, default 42).
    #[arg(long)]
    seed: Option<u64>,
    /// Key to sweep, as `section.key` or an unambiguous bare key.
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let summary = execute(&Invocation {
        command: cli.command,
        config: cli.config,
        seed: cli.seed,
        param: cli.param,
        values: cli.values,
        out_root: std::env::var_os("WAVECTL_OUT").map(PathBuf::from),
    });
    println!("{}", summary.line());
    ExitCode::from(summary.exit)
}
