//! Config file loading: one TOML key per [`TrainConfig`] field.

use std::path::Path;

use crate::domain::TrainConfig;
use crate::error::{BiglError, Result};

/// Parse a TOML config from text. Unknown keys are rejected so typos cannot
/// silently fall back to defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text)
        .map_err(|e| BiglError::IngestError(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BiglError::IngestError(format!("config {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn save_config(cfg: &TrainConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| BiglError::IngestError(format!("config serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}
