//! Driver around the coupling library: flat-config parsing, shipped presets,
//! deterministic experiment execution, and a checker battery.
//!
//! Everything the binary does is callable from here, so integration tests
//! exercise the same code paths as the command line.

pub mod config;
pub mod experiment;
pub mod presets;
pub mod verify;
