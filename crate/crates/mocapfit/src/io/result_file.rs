//! Solve-result files: solved parameters, the marker-vertex correspondence,
//! the chosen yaw hypothesis, and the full per-stage diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_version, read_json, write_json, FORMAT_VERSION};
use crate::solver::{Diagnostics, SerializableParams, SolveResult, SolveStatus};
use crate::Result;

#[derive(Serialize, Deserialize)]
pub struct ResultFile {
    pub format_version: String,
    pub frame_rate: f64,
    pub status: SolveStatus,
    pub chosen_yaw_deg: f64,
    pub params: SerializableParams,
    /// Assigned vertex per marker; `null` for never-visible markers.
    pub correspondence: Vec<Option<u32>>,
    pub diagnostics: Diagnostics,
}

impl ResultFile {
    pub fn from_result(result: &SolveResult, frame_rate: f64) -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            frame_rate,
            status: result.status,
            chosen_yaw_deg: result.chosen_yaw_deg,
            params: (&result.params).into(),
            correspondence: result.correspondence.vertex.clone(),
            diagnostics: result.diagnostics.clone(),
        }
    }
}

pub fn write_result_file(path: &Path, file: &ResultFile) -> Result<()> {
    write_json(path, file)
}

pub fn read_result_file(path: &Path) -> Result<ResultFile> {
    let file: ResultFile = read_json(path)?;
    check_version(&file.format_version)?;
    Ok(file)
}
