//! Configuration, checkpoints, the training driver and the file-level
//! commands used by the `semstyle` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod evaluate;
pub mod train;

pub use checkpoint::{checkpoint_dir, latest_checkpoint, load_checkpoint, save_checkpoint, TrainState};
pub use config::{Config, Preset, Stage};
pub use evaluate::{ProviderConfig, Report};
pub use train::{resume, train, TrainOutcome, Trainer};

use crate::error::Error;

/// Process exit status for an error: 2 for usage and configuration
/// problems, 3 for numeric failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config { .. } => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}
