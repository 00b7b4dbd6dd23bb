//! Command-line front end: configuration, runners and CSV reports.

pub mod config;
pub mod error;
pub mod report;
pub mod runs;

pub use config::{build_config, ConfigSources, DatasetKind, ExperimentConfig, Kind};
pub use error::{CliError, Result};
pub use report::{LatentDump, LeakageRow, RunReport};
pub use runs::{run, run_repeat};
