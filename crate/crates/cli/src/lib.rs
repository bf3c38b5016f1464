//! Configuration, commands and report emission behind the `mtsens` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
