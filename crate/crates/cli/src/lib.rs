//! Command implementations behind the `fastscan` binary. Every command is
//! a plain function returning a serializable report so tests can drive
//! them without spawning processes.

pub mod bench;
pub mod failure;
pub mod flops_table;
pub mod forward;
pub mod gradcheck;
pub mod models;
pub mod verify;

pub use failure::{CmdResult, Failure, EXIT_CONFIG, EXIT_IO, EXIT_PROPERTY};
