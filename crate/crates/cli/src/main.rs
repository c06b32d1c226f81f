use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use jumpres_cli::{parse_config, run, CliError, Command};

#[derive(Parser)]
#[command(name = "jumpres", version = env!("JUMPRES_VERSION"), about = "Reservoir control under clustered-jump inflows")]
struct Args {
    command: Command,
    /// JSON config, or the manifest.json of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Dotted key and JSON value, e.g. `numerics.h=0.5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn execute(args: Args) -> Result<(), CliError> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
        None => "{}".to_string(),
    };
    let mut config = parse_config(&text, &args.overrides)?;
    if let Some(seed) = args.seed {
        config.numerics.seed = seed;
    }
    let out_dir = args.out_dir.or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    config.output_dir = Some(out_dir.clone());
    let outcome = run(args.command, &config, &out_dir)?;
    for w in &outcome.warnings {
        eprintln!("{w}");
    }
    println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
    Ok(())
}

fn main() -> ExitCode {
    match execute(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jumpres: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
