mod commands;
mod output;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use temphom::Error;

use commands::{CircuitAction, Ctx};
use scenario::Scenario;

/// Effective dynamics of periodically perturbed linear systems.
#[derive(Debug, Parser)]
#[command(name = "temphom", version)]
struct Cli {
    /// Scenario JSON file.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Directory for CSV/JSON outputs.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for independent runs inside one command.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides `run.seed` from the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Effective matrix by both routes, with the boundedness verdict.
    Effective,
    /// Reference and homogenized trajectories plus error metrics.
    Simulate,
    /// Amplitude tracking by switched parametric modulation.
    Control,
    /// Circuit-bank analysis.
    Circuits {
        #[arg(value_enum)]
        action: Action,
        /// Start `verify` from a seeded random state instead of the collective mode.
        #[arg(long)]
        random_x0: bool,
    },
    /// Homogenized solution against the first-order Floquet expansion.
    CompareFloquet,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Action {
    Analyze,
    Verify,
}

/// Command failure, by exit code.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Unbounded(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Unbounded(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Unbounded(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::UnboundedConjugation(_) => Failure::Unbounded(msg),
            Error::ExpOverflow { .. }
            | Error::DefectiveMatrix { .. }
            | Error::DivergenceDetected { .. }
            | Error::StepUnderflow { .. } => Failure::Numerical(msg),
            _ => Failure::Input(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(format!("i/o: {e}"))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let path = cli.scenario.ok_or_else(|| Failure::Input("--scenario is required".into()))?;
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let scenario = Scenario::parse(&text).map_err(Failure::Input)?;
    std::fs::create_dir_all(&cli.out)?;
    let seed = cli.seed.or(scenario.run.seed).unwrap_or(0);
    let ctx = Ctx { scenario, out: &cli.out, jobs: cli.jobs.max(1), seed };
    match cli.command {
        Command::Effective => commands::effective(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Control => commands::control(&ctx),
        Command::Circuits { action, random_x0 } => {
            let action = match action {
                Action::Analyze => CircuitAction::Analyze,
                Action::Verify => CircuitAction::Verify,
            };
            commands::circuits(&ctx, action, random_x0)
        }
        Command::CompareFloquet => commands::compare_floquet(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
