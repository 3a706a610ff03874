//! File formats, sweeps and the command-line front end for `headkv-core`.

pub mod analyze;
pub mod cli;
pub mod config_file;
pub mod report;
pub mod selftest;
pub mod sweep;
pub mod trace_io;
