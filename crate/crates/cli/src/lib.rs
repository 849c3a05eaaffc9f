//! The `spinterp` command-line tool and HTTP service.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod server;

pub use commands::{run, run_from, Cli};
pub use error::{CliError, CliResult};
