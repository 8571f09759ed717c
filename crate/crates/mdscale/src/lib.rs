//! File formats, configuration loading and the command-line front end for
//! the `mdscale-core` simulator.

pub mod config;
pub mod output;

pub use mdscale_core as core;
