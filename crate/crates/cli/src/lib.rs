//! Scenario-driven front end: declarative experiments over chains, experts
//! and variational families, with sample, metric and trace outputs.

pub mod commands;
pub mod error;
pub mod output;
pub mod scenario;

pub use error::{CliError, Result};
pub use scenario::Scenario;
