//! Solver configuration files: JSON mirroring the [`SolverConfig`] field
//! names. Every field is optional; an empty object reproduces the defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_version, read_json, write_json, FORMAT_VERSION};
use crate::solver::SolverConfig;
use crate::Result;

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    #[serde(default = "default_version")]
    format_version: String,
    #[serde(flatten)]
    config: SolverConfig,
}

fn default_version() -> String {
    FORMAT_VERSION.to_string()
}

pub fn read_config_file(path: &Path) -> Result<SolverConfig> {
    let file: ConfigFile = read_json(path)?;
    check_version(&file.format_version)?;
    file.config.validate()?;
    Ok(file.config)
}

pub fn write_config_file(path: &Path, config: &SolverConfig) -> Result<()> {
    write_json(
        path,
        &ConfigFile {
            format_version: default_version(),
            config: config.clone(),
        },
    )
}
