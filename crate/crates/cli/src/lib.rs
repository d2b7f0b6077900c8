//! Command-line layer over `combo_core`: strict JSON run configs, one
//! function per subcommand, and SVG chart emission.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{exit_code, execute, Cli, Command, Common, Output};
pub use config::{RunConfig, ScoringConfig};
