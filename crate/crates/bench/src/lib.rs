//! Monte Carlo benchmark harness for network module identification:
//! configuration, parallel runs, summary statistics and artifact output.

pub mod config;
pub mod emit;
pub mod run;
pub mod summary;

pub use config::{ExperimentConfig, Method};
pub use emit::{emit, Format, Manifest};
pub use run::{run_monte_carlo, ResultTable};
pub use summary::{summarize, SummaryStats};
