//! Command implementations and the HTTP server behind the `cbhir` binary.

pub mod commands;
pub mod server;
