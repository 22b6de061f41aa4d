use std::process::ExitCode;

use clap::Parser;

mod commands;
mod logging;

use commands::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.common.verbose);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
