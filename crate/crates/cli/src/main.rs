use std::process::ExitCode;

use clap::Parser;
use rigidflow_cli::args::{Cli, Command};
use rigidflow_cli::commands::{emit, run_eval, run_flow, run_synth};
use rigidflow_cli::CliError;

fn run(cli: &Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Flow(a) => emit(&run_flow(a)?, a.report.as_deref()),
        Command::Synth(a) => emit(&run_synth(a)?, None),
        Command::Eval(a) => emit(&run_eval(a)?, a.report.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
