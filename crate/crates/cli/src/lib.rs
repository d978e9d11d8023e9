//! Command-line front end: one subcommand per pipeline stage plus an
//! end-to-end `pipeline` runner. Every stage leaves a stamp recording its
//! inputs, outputs, seed and config hash.

pub mod commands;
pub mod pipeline;
pub mod stages;
pub mod stamp;

pub use commands::{run, Cli};
pub use pipeline::{run_pipeline, PipelineConfig};
