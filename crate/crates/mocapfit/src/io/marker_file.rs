//! Marker sequences: `{frame_rate, marker_ids, frames}` with `null` for
//! missing positions. Positions exactly at the origin are treated as missing
//! too, matching raw exports where lost markers reset to the origin.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{check_version, read_json, write_json, FORMAT_VERSION};
use crate::segmentation::MarkerSequence;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct MarkerFile {
    pub format_version: String,
    pub frame_rate: f64,
    pub marker_ids: Vec<String>,
    /// frames x markers; `None` marks a missing sample
    pub frames: Vec<Vec<Option<[f64; 3]>>>,
}

impl MarkerFile {
    pub fn from_sequence(markers: &MarkerSequence) -> Self {
        let frames = (0..markers.frame_count())
            .map(|t| {
                (0..markers.marker_count())
                    .map(|m| {
                        if markers.is_visible(t, m) {
                            let p = markers.position(t, m);
                            Some([p.x, p.y, p.z])
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION.to_string(),
            frame_rate: markers.frame_rate(),
            marker_ids: markers.marker_ids().to_vec(),
            frames,
        }
    }

    pub fn to_sequence(&self) -> Result<MarkerSequence> {
        let m = self.marker_ids.len();
        let mut positions = Vec::with_capacity(self.frames.len() * m);
        let mut visible = Vec::with_capacity(self.frames.len() * m);
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != m {
                return Err(Error::Parse {
                    locus: format!("frame {t}"),
                    message: format!("{} samples for {m} markers", frame.len()),
                });
            }
            for sample in frame {
                match sample {
                    Some(p) => {
                        positions.push(Vector3::new(p[0], p[1], p[2]));
                        visible.push(true);
                    }
                    None => {
                        positions.push(Vector3::zeros());
                        visible.push(false);
                    }
                }
            }
        }
        MarkerSequence::new(self.marker_ids.clone(), self.frame_rate, positions, visible)
    }
}

pub fn write_marker_file(path: &Path, markers: &MarkerSequence) -> Result<()> {
    write_json(path, &MarkerFile::from_sequence(markers))
}

pub fn read_marker_file(path: &Path) -> Result<MarkerFile> {
    let file: MarkerFile = read_json(path)?;
    check_version(&file.format_version)?;
    Ok(file)
}

/// Parses a marker file and decimates it to `target_rate` by frame dropping.
/// The input rate must be an integer multiple of the target rate.
pub fn ingest_markers(file: &MarkerFile, target_rate: f64) -> Result<MarkerSequence> {
    check_version(&file.format_version)?;
    if !(target_rate > 0.0) {
        return Err(Error::InvalidParams("target rate must be positive".into()));
    }
    let ratio = file.frame_rate / target_rate;
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        let suggestion = file.frame_rate / ratio.round().max(1.0);
        return Err(Error::InvalidParams(format!(
            "cannot decimate {} Hz to {} Hz by an integer factor; nearest valid rate is {} Hz",
            file.frame_rate, target_rate, suggestion
        )));
    }
    let factor = factor as usize;
    let sequence = file.to_sequence()?;
    if factor == 1 {
        return Ok(sequence);
    }
    let m = sequence.marker_count();
    let mut positions = Vec::new();
    let mut visible = Vec::new();
    for t in (0..sequence.frame_count()).step_by(factor) {
        for i in 0..m {
            positions.push(sequence.position(t, i));
            visible.push(sequence.is_visible(t, i));
        }
    }
    MarkerSequence::new(
        sequence.marker_ids().to_vec(),
        target_rate,
        positions,
        visible,
    )
}
