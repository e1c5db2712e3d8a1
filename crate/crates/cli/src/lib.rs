//! Command implementations behind the `localctl` binary.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate, cmd_dataset, cmd_eval, cmd_generate, cmd_train, Outcome, CODE_VERSION,
};
pub use config::RunConfig;
