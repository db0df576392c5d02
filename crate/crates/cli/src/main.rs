//! `effpolicy`: batch front end for learning randomized treatment
//! policies, fitting stabilized weights, running Monte Carlo studies and
//! regret asymptotics.
//!
//! Every run writes `manifest.json` next to its outputs. `effpolicy replay
//! --manifest m.json` reruns it from the recorded arguments and configs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

mod commands;
mod inputs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use effpolicy::{Error, ErrorClass, Result};

use crate::commands::{write_json, Command};
use crate::inputs::{from_value, parse_json_text, Inputs, Manifest};

#[derive(Debug, Parser)]
#[command(name = "effpolicy", version, about = "Learn welfare-maximizing randomized treatment policies")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Top,
}

#[derive(Debug, Subcommand)]
enum Top {
    #[command(flatten)]
    Run(Command),
    /// Rerun a recorded run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the manifest's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn execute(command: Command, mut inputs: Inputs) -> Result<()> {
    let seed = command.run(&mut inputs)?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        command: command.clone(),
        inputs: inputs.into_records(),
    };
    write_json(&command.out().join("manifest.json"), &manifest)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.manifest)
        .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", a.manifest.display())))?;
    let manifest: Manifest = from_value(parse_json_text(&text, "manifest")?, "manifest")?;
    if manifest.tool != env!("CARGO_PKG_NAME") {
        return Err(Error::Config(format!("manifest was written by `{}`", manifest.tool)));
    }
    if manifest.version != env!("CARGO_PKG_VERSION") {
        log::warn!("manifest version {} differs from {}", manifest.version, env!("CARGO_PKG_VERSION"));
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    let mut command = manifest.command.clone();
    command.set_out(out);
    execute(command, Inputs::replaying(&manifest))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Top::Run(c) => execute(c, Inputs::fresh()),
        Top::Replay(a) => replay(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
