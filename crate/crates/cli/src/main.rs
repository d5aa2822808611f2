//! `afmm`: batch reinitialization, convergence tables and the diagonal
//! stencil study.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 numerical failure.

mod commands;
mod settings;

use afmm::AfmmError;
use clap::{Parser, Subcommand};
use settings::{resolve_run, resolve_stencil, RunArgs, StencilArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(AfmmError),
}

impl From<AfmmError> for CliError {
    fn from(e: AfmmError) -> Self {
        match e {
            AfmmError::InvalidGrid(_) | AfmmError::InvalidInput(_) => {
                CliError::Usage(e.to_string())
            }
            AfmmError::Io(s) => CliError::Io(s),
            other => CliError::Numerical(other),
        }
    }
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "afmm", version = commands::BUILD_ID, about = "Augmented fast marching reinitialization")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Reinitialize a named shape or an input field and dump the jet field
    Reinit(RunArgs),
    /// Error norms over several grids with fitted convergence orders
    Convergence(RunArgs),
    /// Closed-form errors of the diagonal two-neighbor stencil near a circle
    StencilStudy(StencilArgs),
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let (workers, job): (
        usize,
        Box<dyn FnOnce() -> Result<serde_json::Value, CliError> + Send>,
    ) = match cli.verb {
        Verb::Reinit(a) => {
            let s = resolve_run(a)?;
            (s.common.workers, Box::new(move || commands::reinit(&s)))
        }
        Verb::Convergence(a) => {
            let s = resolve_run(a)?;
            (
                s.common.workers,
                Box::new(move || commands::convergence(&s)),
            )
        }
        Verb::StencilStudy(a) => {
            let s = resolve_stencil(a)?;
            (s.common.workers, Box::new(move || commands::stencil(&s)))
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    pool.install(job)
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => println!(
            "{}",
            serde_json::to_string_pretty(&summary).expect("summary serializes")
        ),
        Err(e) => {
            eprintln!("afmm: {e}");
            std::process::exit(e.code());
        }
    }
}
