//! Command-line front end for `spikenorm`: configuration, commands, reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
