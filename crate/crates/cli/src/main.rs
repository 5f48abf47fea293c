mod args;
mod commands;
mod output;
mod svg;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

pub use args::Cli;

/// An error printed as `E:<code>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub exit: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: "usage".into(),
            message: message.into(),
            exit: 2,
        }
    }

    pub fn data(code: &str, message: impl Into<String>) -> Self {
        CliError {
            code: code.into(),
            message: message.into(),
            exit: 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data("io", format!("{}: {e}", path.display()))
    }
}

impl From<conceptscope_core::Error> for CliError {
    fn from(e: conceptscope_core::Error) -> Self {
        CliError::data(e.code(), e.to_string())
    }
}

impl From<conceptscope_service::ServiceError> for CliError {
    fn from(e: conceptscope_service::ServiceError) -> Self {
        CliError::data(e.code(), e.to_string())
    }
}

impl From<conceptscope_client::ClientError> for CliError {
    fn from(e: conceptscope_client::ClientError) -> Self {
        CliError::data(e.code(), e.to_string())
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let mut lines = text.lines();
            let first = lines.next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("E:usage: {first}");
            for l in lines {
                eprintln!("{l}");
            }
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("E:{}: {}", e.code, e.message);
            ExitCode::from(e.exit)
        }
    }
}
