//! Configuration, study driver, exports and the command line.

pub mod cli;
pub mod config;
pub mod study;

pub use config::{load_config, parse_config, StudyConfig};
pub use study::{run_study, StudyResult};
