//! File formats, command line and HTTP service around `derender-core`.

pub mod cli;
pub mod commands;
pub mod error;
pub mod light;
pub mod manifest;
pub mod pfm;
pub mod png;
pub mod server;

pub use error::{CliError, Result};
