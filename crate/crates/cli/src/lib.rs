//! Scenario files, the staged scenario runner, CSV export, reports and SVG
//! plots for the `ltvobs` command.

pub mod config;
pub mod error;
pub mod export;
pub mod plot;
pub mod report;
pub mod scenario;

pub use config::{parse_config, ScenarioConfig};
pub use error::CliError;
