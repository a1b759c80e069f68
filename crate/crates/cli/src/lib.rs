//! Experiment runner for byzsgd: named presets, flat config files, CSV and
//! manifest output, the theory check and small graph utilities.

pub mod commands;
pub mod manifest;
pub mod scenario;

pub use commands::{execute, Cli, Command};
pub use manifest::{Manifest, VERSION};
pub use scenario::{Preset, Scenario};
