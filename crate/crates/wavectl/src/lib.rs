//! Config-driven front end for the `wavecontrol` solvers: parses INI run
//! files, runs the solve and verification commands and writes CSV artifacts.

// `!(a <= b)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod plots;
pub mod problem;

pub use commands::{execute, Command, Invocation, RunSummary};

pub const EXIT_OK: u8 = 0;
/// Bad command line or configuration.
pub const EXIT_USAGE: u8 = 1;
/// A checked bound does not hold; `report.csv` names it.
pub const EXIT_VIOLATION: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
