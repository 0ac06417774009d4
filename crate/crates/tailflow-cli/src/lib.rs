//! Command-layer library behind the `tailflow` binary.
//!
//! Everything the binary can do is exposed here as ordinary functions over
//! paths and in-memory types, so integration tests (and other tools) can
//! drive experiments without spawning processes.

pub mod commands;
pub mod config;
pub mod docs;
pub mod suite;
