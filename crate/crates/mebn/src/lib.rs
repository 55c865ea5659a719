//! File formats, JSON output and the scenario runner for `mebn-core`.

pub mod app;
pub mod format;
pub mod json;
pub mod scenario;
