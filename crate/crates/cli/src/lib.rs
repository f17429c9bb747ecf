//! Command-line front end: configuration files and subcommands.

pub mod commands;
pub mod config;

pub use config::RunConfig;
