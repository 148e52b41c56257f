use std::process::ExitCode;

use clap::Parser;
use env_logger::Env;

use jdit::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(Env::default().filter_or("JDIT_LOG", "info")).init();
    run(Cli::parse())
}
