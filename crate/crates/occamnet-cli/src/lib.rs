//! Everything behind the `occamnet` binary: flag groups, config resolution,
//! data/task plumbing, and the subcommand entry points. Living in a library
//! crate lets the integration tests drive training runs in-process.

pub mod args;
pub mod check;
pub mod config;
pub mod sweep;
pub mod synth;
pub mod task;
pub mod visualize;
