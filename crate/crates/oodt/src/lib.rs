//! Scenario files, result reports and the `oodt` command-line driver for
//! the selling-thread simulator in [`oodt_core`].

pub mod commands;
pub mod report;
pub mod scenario;

pub use commands::{Exit, Options, Output};
pub use scenario::ScenarioFile;
