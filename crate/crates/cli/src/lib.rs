//! Command-line driver and annotation service.

pub mod commands;
pub mod config;
pub mod service;

use std::ffi::OsString;

pub use commands::Cli;
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] ivif_rlhf::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 for bad input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use ivif_rlhf::Error as E;
        match self {
            CliError::Config(_) | CliError::Validation(_) => 1,
            CliError::Core(E::InvalidArgument(_) | E::MissingAnnotations(_) | E::Annotation(_)) => 1,
            CliError::Core(_) | CliError::Runtime(_) => 2,
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
