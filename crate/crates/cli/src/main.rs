use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regcf_cli::{configure_threads, run_command, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "regcf", version, about = "Regularized control-function probit estimation and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Base seed for simulation commands.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for simulation commands.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Fit one estimator to a CSV dataset and write a JSON report.
    Fit,
    /// Run a Monte Carlo experiment and write the summary table.
    Simulate,
    /// Write the Mallows Cp curve over the regularization grid.
    SelectAlpha,
    /// Write average structural function curves.
    Asf,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Fit => Command::Fit,
            Cmd::Simulate => Command::Simulate,
            Cmd::SelectAlpha => Command::SelectAlpha,
            Cmd::Asf => Command::Asf,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.output.is_some() {
        cfg.output = cli.output;
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(t) = cli.threads {
        configure_threads(t)?;
    }
    run_command(cli.command.into(), &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
