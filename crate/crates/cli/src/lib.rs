//! Command-line harness: configuration, experiment orchestration and
//! machine-readable reporting.

pub mod commands;
pub mod config;
pub mod records;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad configuration, flags or input files; exit code 1.
    Validation(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<safeal::Error> for CliError {
    fn from(e: safeal::Error) -> Self {
        use safeal::Error as E;
        match e {
            E::Dimension(_) | E::InvalidParameter(_) | E::Csv { .. } | E::Schema(_) | E::Checkpoint(_) => {
                CliError::Validation(e.to_string())
            }
            E::SingularSystem { .. } | E::EmptyHistory | E::Training(_) | E::Deployment { .. } | E::Io(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "safeal", version, about = "Train, deploy and benchmark safe active-learning policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a query policy and write its checkpoint.
    Train(CommonArgs),
    /// Run methods on benchmark problems and write one record per run.
    Deploy(CommonArgs),
    /// Deploy, then aggregate into a comparison table.
    Bench(CommonArgs),
    /// Draw simulated tasks and write them as records.
    SampleTasks(CommonArgs),
    /// Finite-difference gradient checks for every objective.
    Gradcheck(CommonArgs),
    /// Aggregate an existing deploy record file.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file with flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single seed; replaces `seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated methods.
    #[arg(long)]
    pub method: Option<String>,
    /// Comma-separated problems.
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub budget: Option<u64>,
    /// Checkpoint to write (train) or load (deploy, bench).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overwrite an existing checkpoint.
    #[arg(long)]
    pub force: bool,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Deploy or bench record file; defaults to `<out>/deploy.jsonl`.
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Method whose query time is the denominator of the ratio column.
    #[arg(long)]
    pub reference: Option<String>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&commands::settings(&a, "train")?, a.force),
        Command::Deploy(a) => commands::deploy(&commands::settings(&a, "deploy")?).map(|_| ()),
        Command::Bench(a) => commands::bench(&commands::settings(&a, "deploy")?),
        Command::SampleTasks(a) => commands::sample_tasks(&commands::settings(&a, "sample_tasks")?),
        Command::Gradcheck(a) => commands::gradcheck(&commands::settings(&a, "gradcheck")?),
        Command::Report(a) => commands::report(&a),
    }
}
