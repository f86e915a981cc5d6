mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cascade_core::Error),
    #[error("{0}")]
    Config(String),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => "config",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.category() {
            "invalid-input" | "config" => 2,
            "format" => 3,
            "size" => 4,
            "norm" => 5,
            "dimension" => 6,
            "lda" => 7,
            "normalization" => 8,
            "io" => 9,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    /// Tab-separated rows with a header line.
    Table,
    /// `key: value` lines.
    Text,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Output style on stdout.
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
}

#[derive(Debug, Parser)]
#[command(name = "cascade", version, about = "Cascaded early-rejection template matching")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset, optionally projected into
    /// gallery and probe template files.
    Gen(commands::GenArgs),
    /// Fit an LDA projection to a dataset.
    TrainLda(commands::TrainLdaArgs),
    /// Learn cascade thresholds from the genuine pairs of a dataset.
    Learn(commands::LearnArgs),
    /// Rank a gallery for each probe with the cascade.
    Identify(commands::IdentifyArgs),
    /// Compare the cascade against a linear scan.
    Bench(commands::BenchArgs),
    /// Keep the first stages of a model and cut templates to match.
    Truncate(commands::TruncateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&cli.common, a),
        Command::TrainLda(a) => commands::train_lda(&cli.common, a),
        Command::Learn(a) => commands::learn(&cli.common, a),
        Command::Identify(a) => commands::identify(&cli.common, a),
        Command::Bench(a) => commands::bench(&cli.common, a),
        Command::Truncate(a) => commands::truncate(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
