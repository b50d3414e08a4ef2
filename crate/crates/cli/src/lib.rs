//! Command implementations behind the `styleblend` binary.

pub mod commands;
pub mod dataset;
pub mod error;

pub use error::CliError;
