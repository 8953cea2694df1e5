//! Training configuration files: TOML whose sections mirror the training
//! config structure. Unknown keys are hard errors so a mistyped loss-weight
//! or encoder field can never silently fall back to a default.

use std::path::Path;

use anyhow::{Context, Result};
use bislu::train::TrainConfig;

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).context("parsing config")?;
    cfg.validate()
        .map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config {}", path.display()))
}
