//! Command-line layer over `mfc-dgm`: run configs, checkpoints and the
//! `train` / `surface` / `compare` / `nagent` / `oracle` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::CliError;
