//! Command-line front end: JSON run configurations, the sample, sweep, emit
//! and certify pipeline, and CSV/JSON export.

pub mod app;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, Result};
