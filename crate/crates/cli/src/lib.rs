//! Library side of the `kreuse` binary, kept separate so the commands can be
//! driven from tests without spawning processes.

pub mod commands;
pub mod config;
pub mod rundir;

pub use config::{Overrides, RunConfig};
