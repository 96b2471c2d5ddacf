//! Command line entry points and the HTTP service for `persona-probe`.

pub mod backend;
pub mod commands;
pub mod failure;
pub mod service;

pub use commands::{run, Cli};
pub use failure::Failure;
