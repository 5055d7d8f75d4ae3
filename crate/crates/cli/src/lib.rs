//! Library half of the `qslvi` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;

use config::UsageError;

/// Exit status for an error: 2 for usage and configuration problems, 1 for
/// everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else {
        1
    }
}
