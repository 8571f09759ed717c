use std::fs;
use std::path::Path;

use mdscale_core::harness::{ConfigError, ScenarioConfig};
use thiserror::Error;

const SCENARIO1: &str = include_str!("../configs/scenario1.toml");
const SCENARIO2: &str = include_str!("../configs/scenario2.toml");

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(#[from] ConfigError),
}

/// Parses and validates a scenario written in TOML.
pub fn parse(text: &str) -> Result<ScenarioConfig, LoadError> {
    let cfg: ScenarioConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ScenarioConfig, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text)
}

pub fn scenario1() -> ScenarioConfig {
    parse(SCENARIO1).expect("bundled scenario 1 config is valid")
}

pub fn scenario2() -> ScenarioConfig {
    parse(SCENARIO2).expect("bundled scenario 2 config is valid")
}

pub fn to_toml(cfg: &ScenarioConfig) -> String {
    toml::to_string_pretty(cfg).expect("scenario configs serialize")
}
