//! Command-line layer: run configuration files, checkpoints and the
//! `generate`, `train`, `evaluate`, `ablate` and `render-scan` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

/// Environment variable read when `--threads` is not given.
pub const THREADS_ENV: &str = "VIRUS_FIELD_THREADS";

/// Sizes the global worker pool. `None` leaves the default (one worker per
/// core). Only the first call has an effect.
pub fn init_threads(threads: Option<usize>) -> error::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return error::usage("--threads must be at least 1");
        }
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
