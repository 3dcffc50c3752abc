mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ceai_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

/// Contrastive expert activation inspection on toy mixture-of-experts models.
#[derive(Debug, Parser)]
#[command(name = "ceai", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Key/value config file (world and model settings).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = one per core). Never changes outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and its planted model configuration.
    GenWorld(commands::GenWorldArgs),
    /// Write contrastive trace pairs for each scenario.
    Trace(commands::TraceArgs),
    /// Contrast two trace files: profile CSV plus expert selection.
    Inspect(commands::InspectArgs),
    /// Score traces with a selection and report F1 / accuracy.
    Classify(commands::ClassifyArgs),
    /// Enhancement / inhibition experiment on the planted model.
    Steer(commands::SteerArgs),
    /// Evaluate retrieval strategies on a balanced QA set.
    RagRun(commands::RagRunArgs),
    /// Merge outcome files into one results table.
    Report(commands::ReportArgs),
    /// Replay a run from its manifest.
    Rerun(commands::RerunArgs),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::PolicyInfeasible(_) => EXIT_INFEASIBLE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli, argv[1..].to_vec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(commands::Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
