//! File formats and ingestion.
//!
//! Every format is a JSON container carrying a `format_version` string;
//! readers reject unknown major versions. Floating-point values round-trip
//! bit-exactly (JSON numbers are written with shortest-form encoding, and the
//! model container stores its arrays as base64 little-endian blobs).

mod config_file;
mod marker_file;
mod model_file;
mod prior_file;
mod result_file;

pub use config_file::{read_config_file, write_config_file};
pub use marker_file::{ingest_markers, read_marker_file, write_marker_file, MarkerFile};
pub use model_file::{read_model_file, write_model_file};
pub use prior_file::{ingest_prior, read_prior_file, write_prior_file, PriorFile, PriorFrame};
pub use result_file::{read_result_file, write_result_file, ResultFile};

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

/// Major version understood by this build.
pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_VERSION: &str = "1.0";

pub(crate) fn check_version(version: &str) -> Result<()> {
    let major = version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok())
        .ok_or_else(|| Error::FormatVersion {
            found: version.to_string(),
            expected: FORMAT_MAJOR,
        })?;
    if major != FORMAT_MAJOR {
        return Err(Error::FormatVersion {
            found: version.to_string(),
            expected: FORMAT_MAJOR,
        });
    }
    Ok(())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let data = std::fs::read_to_string(path)?;
    serde_json::from_str(&data).map_err(|e| Error::Parse {
        locus: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes any serializable value as pretty JSON (used by the CLI reports).
pub fn write_json_value<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

#[cfg(test)]
mod tests;
