//! Per-frame body prior files and their ingestion.
//!
//! Records marked `present: false` (or frames missing from the file) carry no
//! pose data. Ingestion fills leading/trailing gaps with the nearest present
//! frame and interior gaps by interpolation: shape and translation linearly,
//! orientations by spherical linear interpolation per joint. Filled frames are
//! flagged invalid so the correspondence stage can mask them.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{check_version, read_json, write_json, FORMAT_VERSION};
use crate::body_model::{BodyParams, FrameParams};
use crate::math::{lerp, scalar_median, slerp_axis_angle};
use crate::solver::Prior;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorFrame {
    pub frame: usize,
    pub present: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<[f64; 3]>>,
    /// Monocular priors usually carry no world translation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<[f64; 3]>,
    /// Per-frame shape estimate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorFile {
    pub format_version: String,
    pub frame_rate: f64,
    pub shape_count: usize,
    pub frames: Vec<PriorFrame>,
}

impl PriorFile {
    /// Builds a fully-present file from parameters (used for ground truth and
    /// synthesized priors). `present` may mark tracking gaps.
    pub fn from_params(params: &BodyParams, present: &[bool], frame_rate: f64) -> Self {
        let frames = params
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                if present.get(i).copied().unwrap_or(true) {
                    PriorFrame {
                        frame: i,
                        present: true,
                        phi: Some([f.phi.x, f.phi.y, f.phi.z]),
                        theta: Some(f.theta.iter().map(|t| [t.x, t.y, t.z]).collect()),
                        gamma: Some([f.gamma.x, f.gamma.y, f.gamma.z]),
                        beta: Some(params.beta.clone()),
                    }
                } else {
                    PriorFrame {
                        frame: i,
                        present: false,
                        phi: None,
                        theta: None,
                        gamma: None,
                        beta: None,
                    }
                }
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION.to_string(),
            frame_rate,
            shape_count: params.beta.len(),
            frames,
        }
    }
}

struct PresentRecord {
    phi: Vector3<f64>,
    theta: Vec<Vector3<f64>>,
    gamma: Vector3<f64>,
    beta: Vec<f64>,
}

/// Ingests a prior file into solver parameters for `target_frames` frames,
/// returning the parameters and the validity mask. The sequence-level shape is
/// the componentwise median of the per-frame shapes.
pub fn ingest_prior(file: &PriorFile, target_frames: usize) -> Result<Prior> {
    check_version(&file.format_version)?;
    if target_frames == 0 {
        return Err(Error::InvalidParams("target frame count must be positive".into()));
    }
    let mut last_frame: Option<usize> = None;
    let mut present: Vec<(usize, PresentRecord)> = Vec::new();
    for record in &file.frames {
        if let Some(prev) = last_frame {
            if record.frame <= prev {
                return Err(Error::Parse {
                    locus: format!("frame record {}", record.frame),
                    message: "frame indices must be strictly increasing".into(),
                });
            }
        }
        last_frame = Some(record.frame);
        if !record.present || record.frame >= target_frames {
            continue;
        }
        let phi = record.phi.ok_or_else(|| missing(record.frame, "phi"))?;
        let theta = record
            .theta
            .as_ref()
            .ok_or_else(|| missing(record.frame, "theta"))?;
        let beta = record
            .beta
            .as_ref()
            .ok_or_else(|| missing(record.frame, "beta"))?;
        if beta.len() != file.shape_count {
            return Err(Error::ShapeMismatch(format!(
                "frame {}: {} shape coefficients, file declares {}",
                record.frame,
                beta.len(),
                file.shape_count
            )));
        }
        let gamma = record.gamma.map(Vector3::from).unwrap_or_else(Vector3::zeros);
        present.push((
            record.frame,
            PresentRecord {
                phi: Vector3::from(phi),
                theta: theta.iter().map(|t| Vector3::from(*t)).collect(),
                gamma,
                beta: beta.clone(),
            },
        ));
    }
    if present.is_empty() {
        return Err(Error::EmptyInput("prior has no present frames".into()));
    }
    let joint_count = present[0].1.theta.len();
    if present.iter().any(|(_, r)| r.theta.len() != joint_count) {
        return Err(Error::ShapeMismatch("joint counts differ across prior frames".into()));
    }

    let mut frames = Vec::with_capacity(target_frames);
    let mut valid = vec![false; target_frames];
    let mut per_frame_beta: Vec<Vec<f64>> = Vec::with_capacity(target_frames);
    let mut cursor = 0usize; // greatest i with present[i].0 <= t, if any
    for t in 0..target_frames {
        while cursor + 1 < present.len() && present[cursor + 1].0 <= t {
            cursor += 1;
        }
        let (frame_at, record) = &present[cursor];
        let fp;
        let beta;
        if *frame_at == t {
            valid[t] = true;
            fp = FrameParams {
                phi: record.phi,
                theta: record.theta.clone(),
                gamma: record.gamma,
            };
            beta = record.beta.clone();
        } else if t < present[0].0 {
            // leading gap: nearest (first) present frame
            let first = &present[0].1;
            fp = FrameParams {
                phi: first.phi,
                theta: first.theta.clone(),
                gamma: first.gamma,
            };
            beta = first.beta.clone();
        } else if cursor + 1 >= present.len() {
            // trailing gap: nearest (last) present frame
            fp = FrameParams {
                phi: record.phi,
                theta: record.theta.clone(),
                gamma: record.gamma,
            };
            beta = record.beta.clone();
        } else {
            // interior gap: interpolate between the bracketing present frames
            let (f0, r0) = &present[cursor];
            let (f1, r1) = &present[cursor + 1];
            let alpha = (t - f0) as f64 / (f1 - f0) as f64;
            let theta = r0
                .theta
                .iter()
                .zip(&r1.theta)
                .map(|(a, b)| slerp_axis_angle(a, b, alpha))
                .collect();
            fp = FrameParams {
                phi: slerp_axis_angle(&r0.phi, &r1.phi, alpha),
                theta,
                gamma: lerp(&r0.gamma, &r1.gamma, alpha),
            };
            beta = r0
                .beta
                .iter()
                .zip(&r1.beta)
                .map(|(a, b)| a + (b - a) * alpha)
                .collect();
        }
        per_frame_beta.push(beta);
        frames.push(fp);
    }

    let sequence_beta: Vec<f64> = (0..file.shape_count)
        .map(|c| {
            let column: Vec<f64> = per_frame_beta.iter().map(|b| b[c]).collect();
            scalar_median(&column)
        })
        .collect();

    Ok(Prior {
        params: BodyParams {
            beta: sequence_beta,
            frames,
        },
        valid,
    })
}

fn missing(frame: usize, field: &str) -> Error {
    Error::Parse {
        locus: format!("frame record {frame}"),
        message: format!("present frame lacks {field}"),
    }
}

pub fn write_prior_file(path: &Path, file: &PriorFile) -> Result<()> {
    write_json(path, file)
}

pub fn read_prior_file(path: &Path) -> Result<PriorFile> {
    let file: PriorFile = read_json(path)?;
    check_version(&file.format_version)?;
    Ok(file)
}
