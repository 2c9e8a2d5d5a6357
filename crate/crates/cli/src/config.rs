//! Layered configuration: built-in defaults (with `MSC_WORKDIR` as the
//! default work dir), then a JSON config file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use msc_core::pipeline::PipelineConfig;
use serde_json::Value;

pub const WORKDIR_ENV: &str = "MSC_WORKDIR";

/// Defaults with the environment applied.
pub fn defaults() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    if let Some(dir) = std::env::var_os(WORKDIR_ENV).filter(|d| !d.is_empty()) {
        cfg.work_dir = PathBuf::from(dir);
    }
    cfg
}

/// Recursively overlays `top` onto `base`; objects merge key by key,
/// everything else is replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults overlaid with the config file, if any.
pub fn load(path: Option<&Path>) -> Result<PipelineConfig> {
    let base = defaults();
    let Some(path) = path else {
        return Ok(base);
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let file: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    anyhow::ensure!(
        file.is_object(),
        "config {} must be a JSON object",
        path.display()
    );
    let mut merged = serde_json::to_value(&base).expect("config serializes");
    merge(&mut merged, file);
    serde_json::from_value(merged).with_context(|| format!("invalid config {}", path.display()))
}
