//! File formats, run configuration, thread-pool drivers and the command line
//! for `odflow-core`.

pub mod cli;
pub mod config;
pub mod drivers;
pub mod io;
