//! Experiment harness: single runs, label/α/k sweeps, baselines and
//! synthetic data export.

pub mod config;
pub mod error;
pub mod harness;
pub mod report;

pub use config::{DataSource, RunSpec};
pub use error::{HarnessError, Result};
pub use report::{SweepReport, SweepRow};
