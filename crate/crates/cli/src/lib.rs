//! Command-line harness over the scheduling core and the learned policy.

pub mod commands;
pub mod io;
pub mod policy;
pub mod report;

pub use commands::{run, Cli};
