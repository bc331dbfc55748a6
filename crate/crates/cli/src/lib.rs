//! Experiment drivers behind the `gka` command-line tool.

pub mod bench;
pub mod equivalence;
pub mod gradcheck;
pub mod mqar_cmd;
pub mod report;
