//! Experiment runner and file formats around `palmbridge-core`.
//!
//! [`config`] parses and validates experiment files, [`runner`] drives the
//! seeded pipeline and the sweeps, [`formats`] reads and writes every
//! artifact. The `palmbridge` binary is a thin layer over these.

pub mod config;
pub mod error;
pub mod formats;
pub mod runner;

pub use config::{ExperimentConfig, Variant};
pub use error::{CliError, Result};
