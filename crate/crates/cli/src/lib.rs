//! Experiment driver for motionforge: configuration, the subcommands and
//! reporting.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use config::{ConfigError, RunConfig};

/// Effective configuration: defaults, then the config file, then
/// `MOTIONFORGE_OUT`, then explicit `--key value` flags.
pub fn effective_config(
    file: Option<&str>,
    env_out: Option<String>,
    flags: &[(&str, String)],
) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
        cfg.apply_text(&text).map_err(|e: ConfigError| format!("{path}: {e}"))?;
    }
    if let Some(out) = env_out.filter(|s| !s.is_empty()) {
        cfg.out = PathBuf::from(out);
    }
    for (key, value) in flags {
        cfg.set(key, value.trim()).map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}
