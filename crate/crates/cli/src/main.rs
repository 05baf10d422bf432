use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod cache;
mod commands;
mod config;

/// Learn position-dependent feedforward: ILC with basis functions at
/// training positions, then GP regression of the parameters over position.
#[derive(Parser, Debug)]
#[command(name = "posff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Recompute this stage and everything after it instead of using the cache.
    #[arg(long, value_enum)]
    pub stage: Option<Stage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Stage {
    Collect,
    Fit,
    Evaluate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-loop run at one position with fixed feedforward parameters.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated position; defaults to the center.
        #[arg(long)]
        position: Option<String>,
        /// Comma-separated feedforward parameters; zero when absent.
        #[arg(long)]
        theta: Option<String>,
    },
    /// One learning session at a position.
    Ilc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        position: Option<String>,
    },
    /// Learning sessions at every training position.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one GP per feedforward parameter.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// GP predictions at the test positions or at `--position`.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Repeatable; defaults to the configured test positions.
        #[arg(long)]
        position: Vec<String>,
    },
    /// Compare center, GP and local-ILC feedforward at the test positions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of center, gp, local_ilc.
        #[arg(long, default_value = "center,gp,local_ilc")]
        methods: String,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(posff::Error),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Core(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "i/o error: {e}"),
            Self::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl From<posff::Error> for CliError {
    fn from(e: posff::Error) -> Self {
        Self::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Core(e) if e.is_stability() => 4,
            Self::Core(e) if e.is_numerical() => 3,
            Self::Core(e) => match e.root() {
                posff::Error::InvalidInput(_)
                | posff::Error::OutOfDomain { .. }
                | posff::Error::DimensionMismatch(_)
                | posff::Error::UnknownBasis(_)
                | posff::Error::InvalidSystem(_) => 2,
                _ => 1,
            },
            Self::Io(_) | Self::Json(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { common, position, theta } => {
            commands::simulate(&common, position.as_deref(), theta.as_deref())
        }
        Command::Ilc { common, position } => commands::ilc(&common, position.as_deref()),
        Command::Collect { common } => commands::collect(&common),
        Command::Fit { common } => commands::fit(&common),
        Command::Predict { common, position } => commands::predict(&common, &position),
        Command::Evaluate { common, methods } => commands::evaluate(&common, &methods),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
