//! Command line workflow and HTTP service for missed-connection models.

pub mod api;
pub mod cli;
pub mod server;
