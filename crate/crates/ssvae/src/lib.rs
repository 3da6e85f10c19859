//! File-system, threading and command-line layer over `ssvae-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod io;
pub mod plot;

pub use cli::run;
