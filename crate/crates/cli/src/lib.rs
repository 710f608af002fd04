//! Command-line front end for the NRDF solver: configuration, commands and
//! the CSV/JSON artifacts they write.

pub mod commands;
pub mod config;
pub mod error;

pub use error::CliError;
