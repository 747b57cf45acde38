//! Experiment harness around the looptune library: configuration files,
//! study execution, deterministic aggregation, and acceptance checks.

pub mod aggregate;
pub mod checks;
pub mod config;
pub mod io;
pub mod study;
