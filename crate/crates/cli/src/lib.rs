//! Command-line front end for the program evaluation pipeline: config
//! parsing, stage orchestration, and the on-disk artifact formats.

pub mod artifacts;
pub mod config;
pub mod pipeline;
