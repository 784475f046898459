//! Command-line front end: configuration parsing, benchmarking helpers,
//! operation/energy accounting, and the subcommand implementations.

pub mod bench;
pub mod commands;
pub mod config;
pub mod efficiency;
