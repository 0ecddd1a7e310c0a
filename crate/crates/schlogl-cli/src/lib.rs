//! Library surface of the scenario runner, exposed for integration tests.

pub mod config;
pub mod scenario;
