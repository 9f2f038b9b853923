//! Command-line pipeline around `svkit`: configuration, run bookkeeping and
//! one verb per processing stage.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use commands::{execute, Cli};
pub use config::Config;
pub use error::CliError;
