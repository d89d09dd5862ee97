//! Command-line surface and viewer server over the `meshsplat` library.

pub mod commands;
pub mod server;

pub use commands::{run, Cli, Command};
