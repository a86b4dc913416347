//! Experiment files, metric outputs and the `run` / `sweep` / `diagnose`
//! drivers behind the `fedasd` binary.
//!
//! An experiment file is UTF-8 text of `key = value` lines. `#` starts a
//! comment. Every key is optional; omitted keys take their default, and the
//! full effective configuration is echoed into every output file.

mod config;
mod model_io;
mod runner;

pub use config::{parse_config, parse_config_str, Experiment, ParsedConfig, KEYS};
pub use model_io::{load_model, save_model};
pub use runner::{
    diagnose, evaluation_split, run_experiment, sweep, RunOutcome, SweepAxis, SweepRow, CSV_HEADER, METRICS_FILE,
    MODEL_FILE, SUMMARY_FILE, SWEEP_FILE, SWEEP_HEADER,
};

use crate::error::{Error, Result};

/// Environment variable overriding the worker-thread count.
pub const WORKERS_ENV: &str = "FEDASD_WORKERS";

/// Sizes the global rayon pool from `FEDASD_WORKERS`, if set. Returns the
/// requested count.
pub fn configure_workers() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Param(format!("{WORKERS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Param(format!("cannot size worker pool: {e}")))?;
    Ok(Some(n))
}
