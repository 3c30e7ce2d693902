//! Harness behind the `patchprune` binary.
//!
//! Each `cmd_*` function takes parsed arguments and a writer, so the same
//! code path serves the binary and the tests.

pub mod bench;
pub mod commands;
pub mod error;
pub mod eval;
pub mod flags;
pub mod sweep;
pub mod visualize;

pub use error::CliError;
