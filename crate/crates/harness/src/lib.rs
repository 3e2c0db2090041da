//! Experiment harness: synthetic data, feature archives, splits, runs,
//! reports and the `cpl` command line.

pub mod archive;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod heatmap;
pub mod metrics;
pub mod split;
pub mod synthetic;

pub use error::{HarnessError, Result};
