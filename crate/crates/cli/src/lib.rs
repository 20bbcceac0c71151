//! Configuration and subcommand implementations behind the `mfedch` binary.

pub mod commands;
pub mod config;
