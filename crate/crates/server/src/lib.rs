//! HTTP API for the selection UI and the `albf` command-line tool.

pub mod api;
pub mod cli;
