//! Command-line pipeline around `pixelflow-core`: dataset files, run
//! configuration, checkpoints, reports, plots and benchmarks.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod plot;
pub mod report;
pub mod run;

pub use error::{Error, Result};
