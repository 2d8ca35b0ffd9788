//! Filesystem and command-line layer over `dafkit`.
//!
//! Exit codes: 0 success, 2 bad usage or input, 3 numerical failure, 4 partial completion.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod report;
pub mod store;

pub use commands::{run, Cli, Command, Common};
pub use config::ConfigDoc;
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;
