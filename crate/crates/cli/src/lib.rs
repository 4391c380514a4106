//! Command-line driver for the KP-I experiments.

pub mod config;
pub mod dispatch;

use std::ffi::OsString;
use std::io::Write;

use clap::error::ErrorKind;
use clap::Parser;

use config::{resolve, Cli, ConfigError};
use dispatch::{dispatch, error_code, verdict_code, EXIT_CONSTRAINT, EXIT_OK, EXIT_USAGE};

/// Parse `args`, run, and return the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let _ = write!(err, "{e}");
            return EXIT_USAGE;
        }
    };
    let cfg = match resolve(cli) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return match e {
                ConfigError::Constraint(_) => EXIT_CONSTRAINT,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(&cfg, out) {
        Ok(v) => verdict_code(v),
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            error_code(&e)
        }
    }
}
