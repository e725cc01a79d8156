//! Config-driven orchestration: subcommands over a single run directory.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod rundir;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelKind};
pub use commands::{Command, Context};
pub use config::{parse_config, RunConfig};
pub use rundir::{Manifest, RunDir};
