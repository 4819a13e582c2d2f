use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use magflow::{parse_config, run, Command};

/// Periodic orbits of magnetic systems on the 2-sphere.
#[derive(Parser)]
#[command(name = "magflow", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (flat `section.key = value` file).
    #[arg(long)]
    config: PathBuf,
    /// Directory for CSV artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed; overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match parse_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("magflow: {e}");
            return ExitCode::from(1);
        }
    };
    let seed = cli.seed.unwrap_or(cfg.run_seed);
    let (envelope, code) = run(cli.command, &cfg, seed, cli.out.as_deref());
    if let Some(err) = &envelope.error {
        eprintln!("magflow {}: {}: {}", cli.command.name(), err.kind, err.message);
    }
    match serde_json::to_string_pretty(&envelope) {
        Ok(s) => println!("{s}"),
        Err(e) => {
            eprintln!("magflow: cannot serialize result: {e}");
            return ExitCode::from(1);
        }
    }
    ExitCode::from(code as u8)
}
