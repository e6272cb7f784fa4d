//! Audio IO, log-mel features, synthetic corpora, run configuration,
//! checkpoints and the `paed` command line, on top of `paed-core`.

pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod features;
pub mod reports;

pub use error::{Error, Result};
