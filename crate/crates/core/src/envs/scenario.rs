//! Scenario files: a [`GridNavConfig`] written as TOML.
//!
//! Every field of [`GridNavConfig`] is a top-level key. Cell sets are arrays
//! of cell indices and initial distributions are arrays of
//! `[cell, probability]` pairs, for example `train_init = [[20, 0.5], [21, 0.5]]`.
//! `name`, `hazard_cells` and `walls` may be omitted.

use std::path::Path;

use super::{GridNav, GridNavConfig};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 2] = ["shifted-start", "matched-start"];

const SHIFTED_START: &str = include_str!("../../scenarios/shifted-start.toml");
const MATCHED_START: &str = include_str!("../../scenarios/matched-start.toml");

pub fn parse_scenario(text: &str) -> Result<GridNavConfig> {
    toml::from_str(text).map_err(|e| Error::parse("scenario", e))
}

/// Read and validate a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<GridNav> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let config = parse_scenario(&text).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::parse(path.display().to_string(), msg),
        other => other,
    })?;
    GridNav::new(config)
}

pub fn scenario_to_string(config: &GridNavConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::parse("scenario", e))
}

/// One of the built-in scenarios listed in [`PRESET_NAMES`].
pub fn preset(name: &str) -> Result<GridNav> {
    let text = match name {
        "shifted-start" => SHIFTED_START,
        "matched-start" => MATCHED_START,
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {PRESET_NAMES:?})"
            )))
        }
    };
    GridNav::new(parse_scenario(text)?)
}
