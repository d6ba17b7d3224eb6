//! Staged mocap solving with yaw multiple-hypothesis testing.
//!
//! The pipeline: segment markers into rigid groups, localize the matching
//! kinematic chain, then for each root-yaw hypothesis run pose fitting
//! (stage 2), marker-vertex correspondence (stage 3), and inverse kinematics
//! (stage 4). The hypothesis with the lowest whole-body Chamfer energy wins
//! and gets one refinement pass (stage 5) that re-derives the correspondence
//! and repeats the IK with the pose regularized against its own stage-4
//! output.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, BodyParams, FrameBackward, FrameParams};
use crate::math::{rodrigues, rotation_grad_to_axis_angle, skew, UpAxis};
use crate::optim::{minimize, OptimSettings, Status};
use crate::part_localization::{
    chamfer_frame, localize_part, shape_reg, CandidateEnergy, LocalizationConfig,
};
use crate::segmentation::{cluster_markers, distance_std_affinity, MarkerSequence};
use crate::{Error, Result};

/// Ingested per-frame body prior: parameters plus a validity mask (false on
/// frames that were filled by interpolation or nearest-frame padding).
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub params: BodyParams,
    pub valid: Vec<bool>,
}

impl Prior {
    pub fn fully_valid(params: BodyParams) -> Self {
        let valid = vec![true; params.frame_count()];
        Self { params, valid }
    }
}

/// Weights and optimizer settings for the stage-2 pose fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage2Config {
    pub lambda_chamfer: f64,
    pub lambda_beta: f64,
    pub lambda_theta: f64,
    pub optim: OptimSettings,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_chamfer: 10.0,
            lambda_beta: 1.0,
            lambda_theta: 1.0,
            optim: OptimSettings::default().with_learning_rate(0.1),
        }
    }
}

/// Weights and optimizer settings for the stage-4 inverse kinematics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage4Config {
    pub lambda_marker: f64,
    pub lambda_beta: f64,
    pub lambda_theta: f64,
    pub optim: OptimSettings,
}

impl Default for Stage4Config {
    fn default() -> Self {
        Self {
            lambda_marker: 1.0,
            lambda_beta: 1.0,
            lambda_theta: 0.1,
            optim: OptimSettings::default().with_learning_rate(1.0),
        }
    }
}

/// Full solver configuration. The defaults reproduce the reference settings;
/// an empty config file changes nothing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SolverConfig {
    /// Initial yaw hypotheses, degrees.
    pub yaw_hypotheses_deg: Vec<f64>,
    /// Marker offset from the skin, meters.
    pub delta: f64,
    pub up_axis: UpAxis,
    pub refinement_repeats: usize,
    /// Run the yaw hypotheses on the rayon pool.
    pub parallel_hypotheses: bool,
    pub stage2: Stage2Config,
    pub stage4: Stage4Config,
    pub localization: LocalizationConfig,
    /// Threshold for the marker segmentation, meters.
    pub cluster_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            yaw_hypotheses_deg: vec![0.0, 90.0, 180.0, 270.0],
            delta: 0.0095,
            up_axis: UpAxis::Y,
            refinement_repeats: 1,
            parallel_hypotheses: true,
            stage2: Stage2Config::default(),
            stage4: Stage4Config::default(),
            localization: LocalizationConfig::default(),
            cluster_threshold: crate::segmentation::DEFAULT_CLUSTER_THRESHOLD,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.yaw_hypotheses_deg.is_empty() {
            return Err(Error::InvalidParams("yaw hypothesis set is empty".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidParams("marker offset delta must be positive".into()));
        }
        let weights = [
            self.stage2.lambda_chamfer,
            self.stage2.lambda_beta,
            self.stage2.lambda_theta,
            self.stage4.lambda_marker,
            self.stage4.lambda_beta,
            self.stage4.lambda_theta,
            self.localization.lambda_chamfer,
            self.localization.lambda_beta,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParams("energy weights must be non-negative".into()));
        }
        self.stage2.optim.validate()?;
        self.stage4.optim.validate()?;
        self.localization.optim.validate()?;
        Ok(())
    }
}

/// Marker-to-vertex assignment, fixed across the sequence. `None` marks a
/// marker that is never visible (or visible only in masked frames).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub vertex: Vec<Option<u32>>,
}

/// Outcome of one optimization stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageDiag {
    pub iterations: usize,
    pub status: Status,
    /// Final objective value of the stage.
    pub objective: f64,
    /// Whole-body Chamfer energy at the stage output, m^2.
    pub e3d: f64,
}

/// Per-hypothesis record: the yaw it started from and what each stage did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisDiag {
    pub yaw_deg: f64,
    pub stage2: StageDiag,
    pub stage4: StageDiag,
    /// Selection energy (whole-body Chamfer on the stage-4 result).
    pub selection_e3d: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationDiag {
    pub cluster_count: usize,
    pub chain_length: usize,
    pub fallback_used: bool,
    pub chain_bone_names: Vec<String>,
    pub candidates: Vec<CandidateEnergy>,
    pub e3d: f64,
}

/// Parameters captured after each stage of the winning hypothesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSnapshots {
    pub localization: SerializableParams,
    pub stage2: SerializableParams,
    pub stage4: SerializableParams,
    pub stage5: SerializableParams,
}

/// Plain-array form of [`BodyParams`] used inside diagnostics and files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializableParams {
    pub beta: Vec<f64>,
    pub phi: Vec<[f64; 3]>,
    pub theta: Vec<Vec<[f64; 3]>>,
    pub gamma: Vec<[f64; 3]>,
}

impl From<&BodyParams> for SerializableParams {
    fn from(p: &BodyParams) -> Self {
        Self {
            beta: p.beta.clone(),
            phi: p.frames.iter().map(|f| [f.phi.x, f.phi.y, f.phi.z]).collect(),
            theta: p
                .frames
                .iter()
                .map(|f| f.theta.iter().map(|t| [t.x, t.y, t.z]).collect())
                .collect(),
            gamma: p
                .frames
                .iter()
                .map(|f| [f.gamma.x, f.gamma.y, f.gamma.z])
                .collect(),
        }
    }
}

impl SerializableParams {
    pub fn to_params(&self) -> BodyParams {
        BodyParams {
            beta: self.beta.clone(),
            frames: self
                .phi
                .iter()
                .zip(&self.theta)
                .zip(&self.gamma)
                .map(|((phi, theta), gamma)| FrameParams {
                    phi: Vector3::from(*phi),
                    theta: theta.iter().map(|t| Vector3::from(*t)).collect(),
                    gamma: Vector3::from(*gamma),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub localization: LocalizationDiag,
    pub hypotheses: Vec<HypothesisDiag>,
    pub chosen_index: usize,
    pub stage5: Vec<StageDiag>,
    pub snapshots: StageSnapshots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    Partial,
}

/// Final solver output.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub params: BodyParams,
    pub correspondence: Correspondence,
    /// Winning initial yaw hypothesis, degrees.
    pub chosen_yaw_deg: f64,
    pub status: SolveStatus,
    pub diagnostics: Diagnostics,
}

/// Mean squared pose difference over valid frames: the pose regularizer.
pub fn pose_reg(
    theta_hat: &[FrameParams],
    theta_ref: &[FrameParams],
    valid: &[bool],
) -> Result<f64> {
    if theta_hat.len() != theta_ref.len() || theta_hat.len() != valid.len() {
        return Err(Error::ShapeMismatch(format!(
            "pose sequences differ: {} vs {} frames ({} mask entries)",
            theta_hat.len(),
            theta_ref.len(),
            valid.len()
        )));
    }
    let mut sum = 0.0;
    let mut frames = 0usize;
    let mut coords = 0usize;
    for ((a, b), &ok) in theta_hat.iter().zip(theta_ref).zip(valid) {
        if !ok {
            continue;
        }
        if a.theta.len() != b.theta.len() {
            return Err(Error::ShapeMismatch("joint counts differ".into()));
        }
        frames += 1;
        coords = a.theta.len() * 3;
        for (ta, tb) in a.theta.iter().zip(&b.theta) {
            sum += (ta - tb).norm_squared();
        }
    }
    if frames == 0 || coords == 0 {
        return Err(Error::EmptyInput("no valid frames for pose regularizer".into()));
    }
    Ok(sum / (frames * coords) as f64)
}

/// Whole-body single-directional Chamfer energy of `params` against the
/// markers, all frames, m^2. This is the hypothesis-selection energy.
pub fn whole_body_chamfer(
    markers: &MarkerSequence,
    params: &BodyParams,
    model: &BodyModel,
) -> Result<f64> {
    if params.frame_count() != markers.frame_count() {
        return Err(Error::ShapeMismatch("frame counts differ".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..markers.frame_count() {
        let (_, vertices) = model.forward(params, t)?;
        let fc = chamfer_frame(markers, t, &vertices);
        sum += fc.sum_sq;
        count += fc.visible;
    }
    if count == 0 {
        return Err(Error::EmptyInput("no visible markers".into()));
    }
    Ok(sum / count as f64)
}

/// Posed joints and vertices for every frame.
pub fn forward_all(
    model: &BodyModel,
    params: &BodyParams,
) -> Result<(Vec<Vec<Vector3<f64>>>, Vec<Vec<Vector3<f64>>>)> {
    let mut joints = Vec::with_capacity(params.frame_count());
    let mut vertices = Vec::with_capacity(params.frame_count());
    for t in 0..params.frame_count() {
        let (j, v) = model.forward(params, t)?;
        joints.push(j);
        vertices.push(v);
    }
    Ok((joints, vertices))
}

pub struct Stage2Output {
    pub params: BodyParams,
    /// Optimized yaw offset, radians.
    pub yaw: f64,
    pub diag: StageDiag,
}

/// Stage 2: pose fitting. Minimizes the Chamfer, shape, and pose energies over
/// a yaw offset (composed onto the prior's per-frame orientation), per-frame
/// pose and translation, and the shared shape coefficients.
pub fn stage2_pose_fit(
    markers: &MarkerSequence,
    init: &BodyParams,
    yaw_init: f64,
    prior: &Prior,
    model: &BodyModel,
    config: &SolverConfig,
) -> Result<Stage2Output> {
    let t = markers.frame_count();
    let s = model.shape_count();
    let b = model.bone_count();
    if init.frame_count() != t || prior.params.frame_count() != t {
        return Err(Error::ShapeMismatch("init/prior/marker frame counts differ".into()));
    }
    let visible_total = markers.visible_total();
    if visible_total == 0 {
        return Err(Error::EmptyInput("no visible markers".into()));
    }

    let cfg = &config.stage2;
    let up = config.up_axis;
    let axis_skew = skew(&up.vector());
    let prior_root_rot: Vec<Matrix3<f64>> = prior
        .params
        .frames
        .iter()
        .map(|f| rodrigues(&f.phi))
        .collect();
    let valid_frames = prior.valid.iter().filter(|&&v| v).count();
    if valid_frames == 0 {
        return Err(Error::EmptyInput("prior has no valid frames".into()));
    }
    let theta_coords = (b - 1) * 3;

    // packing: [yaw, beta (s)] ++ per frame [gamma (3), theta (3(b-1))]
    let frame_stride = 3 + theta_coords;
    let mut x0 = vec![0.0; 1 + s + t * frame_stride];
    x0[0] = yaw_init;
    x0[1..1 + s].copy_from_slice(&init.beta);
    for (frame, fp) in init.frames.iter().enumerate() {
        let base = 1 + s + frame * frame_stride;
        x0[base] = fp.gamma.x;
        x0[base + 1] = fp.gamma.y;
        x0[base + 2] = fp.gamma.z;
        for (j, aa) in fp.theta.iter().enumerate() {
            x0[base + 3 + 3 * j] = aa.x;
            x0[base + 3 + 3 * j + 1] = aa.y;
            x0[base + 3 + 3 * j + 2] = aa.z;
        }
    }

    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let yaw = x[0];
        let beta = &x[1..1 + s];
        let shaped = match model.shape(beta) {
            Ok(sb) => sb,
            Err(_) => return f64::NAN,
        };
        let yaw_rot = rodrigues(&(up.vector() * yaw));
        let d_yaw_rot = axis_skew * yaw_rot;
        let mut chamfer_sum = 0.0;
        let mut theta = vec![Vector3::zeros(); b - 1];
        let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(model.vertex_count());
        let mut d_beta_total = vec![0.0; s];
        let mut d_yaw_total = 0.0;
        let mut e_theta_sum = 0.0;
        let theta_norm = (valid_frames * theta_coords) as f64;
        let chamfer_scale = 2.0 * cfg.lambda_chamfer / visible_total as f64;

        for frame in 0..t {
            let base = 1 + s + frame * frame_stride;
            let gamma = Vector3::new(x[base], x[base + 1], x[base + 2]);
            for (j, slot) in theta.iter_mut().enumerate() {
                *slot = Vector3::new(
                    x[base + 3 + 3 * j],
                    x[base + 3 + 3 * j + 1],
                    x[base + 3 + 3 * j + 2],
                );
            }
            let root_rot = yaw_rot * prior_root_rot[frame];
            let pose = match model.pose_frame(&shaped, &root_rot, &theta) {
                Ok(p) => p,
                Err(_) => return f64::NAN,
            };
            positions.clear();
            positions.extend(
                (0..model.vertex_count()).map(|i| model.skin_vertex(&shaped, &pose, i) + gamma),
            );
            let fc = chamfer_frame(markers, frame, &positions);
            chamfer_sum += fc.sum_sq;

            let mut bw = FrameBackward::new(model);
            for &(marker, idx) in &fc.matches {
                let diff = positions[idx] - markers.position(frame, marker);
                bw.add_vertex_grad(model, &shaped, &pose, idx, &(diff * chamfer_scale));
            }
            let grads = bw.finish(model, &shaped, &pose, &theta);
            // yaw gradient: root = R_up(yaw) * R_prior
            d_yaw_total += (grads.d_root_rot * prior_root_rot[frame].transpose())
                .component_mul(&d_yaw_rot)
                .sum();
            grad[base] += grads.d_gamma.x;
            grad[base + 1] += grads.d_gamma.y;
            grad[base + 2] += grads.d_gamma.z;
            for (j, d) in grads.d_theta.iter().enumerate() {
                grad[base + 3 + 3 * j] += d.x;
                grad[base + 3 + 3 * j + 1] += d.y;
                grad[base + 3 + 3 * j + 2] += d.z;
            }
            for (acc, d) in d_beta_total.iter_mut().zip(&grads.d_beta) {
                *acc += d;
            }
            // pose regularizer against the prior, masked frames excluded
            if prior.valid[frame] {
                let scale = 2.0 * cfg.lambda_theta / theta_norm;
                for (j, slot) in theta.iter().enumerate() {
                    let diff = slot - prior.params.frames[frame].theta[j];
                    e_theta_sum += diff.norm_squared();
                    grad[base + 3 + 3 * j] += scale * diff.x;
                    grad[base + 3 + 3 * j + 1] += scale * diff.y;
                    grad[base + 3 + 3 * j + 2] += scale * diff.z;
                }
            }
        }
        let e_chamfer = chamfer_sum / visible_total as f64;
        let e_theta = e_theta_sum / theta_norm;
        let e_beta = shape_reg(beta, &prior.params.beta).unwrap_or(f64::NAN);
        grad[0] += d_yaw_total;
        for (i, g) in grad[1..1 + s].iter_mut().enumerate() {
            *g += d_beta_total[i]
                + cfg.lambda_beta * 2.0 * (beta[i] - prior.params.beta[i]) / s.max(1) as f64;
        }
        cfg.lambda_chamfer * e_chamfer + cfg.lambda_beta * e_beta + cfg.lambda_theta * e_theta
    };

    let result = minimize(objective, &x0, &cfg.optim)?;

    let x = &result.x;
    let yaw = x[0];
    let yaw_aa = up.vector() * yaw;
    let mut params = BodyParams {
        beta: x[1..1 + s].to_vec(),
        frames: Vec::with_capacity(t),
    };
    for frame in 0..t {
        let base = 1 + s + frame * frame_stride;
        let mut fp = FrameParams::zeros(b);
        fp.phi = crate::math::compose_axis_angle(&yaw_aa, &prior.params.frames[frame].phi);
        fp.gamma = Vector3::new(x[base], x[base + 1], x[base + 2]);
        for j in 0..b - 1 {
            fp.theta[j] = Vector3::new(
                x[base + 3 + 3 * j],
                x[base + 3 + 3 * j + 1],
                x[base + 3 + 3 * j + 2],
            );
        }
        params.frames.push(fp);
    }
    let e3d = whole_body_chamfer(markers, &params, model)?;
    Ok(Stage2Output {
        params,
        yaw,
        diag: StageDiag {
            iterations: result.iterations,
            status: result.status,
            objective: result.f,
            e3d,
        },
    })
}

/// Stage 3: for each marker, the vertex with the closest average distance over
/// the frames where the marker is visible and the prior frame is valid.
/// Ties go to the lowest vertex index; markers with no eligible frame are
/// unassigned.
pub fn stage3_correspondence(
    markers: &MarkerSequence,
    params: &BodyParams,
    model: &BodyModel,
    prior_valid: &[bool],
) -> Result<Correspondence> {
    let t = markers.frame_count();
    let m = markers.marker_count();
    let v = model.vertex_count();
    if params.frame_count() != t || prior_valid.len() != t {
        return Err(Error::ShapeMismatch("frame counts differ".into()));
    }
    let mut sums = vec![0.0f64; m * v];
    let mut counts = vec![0usize; m];
    for frame in 0..t {
        if !prior_valid[frame] {
            continue;
        }
        let (_, vertices) = model.forward(params, frame)?;
        for (marker, pos) in markers.visible_in_frame(frame) {
            counts[marker] += 1;
            let row = &mut sums[marker * v..(marker + 1) * v];
            for (slot, vert) in row.iter_mut().zip(&vertices) {
                *slot += (vert - pos).norm();
            }
        }
    }
    let vertex = (0..m)
        .map(|marker| {
            if counts[marker] == 0 {
                return None;
            }
            let row = &sums[marker * v..(marker + 1) * v];
            let mut best = 0usize;
            for (i, &d) in row.iter().enumerate() {
                if d < row[best] {
                    best = i;
                }
            }
            Some(best as u32)
        })
        .collect();
    Ok(Correspondence { vertex })
}

/// Loss of stage 4: mean over visible (frame, marker) pairs of the squared
/// deviation of the marker-to-vertex distance from the skin offset `delta`.
pub fn marker_offset_loss(
    markers: &MarkerSequence,
    correspondence: &Correspondence,
    params: &BodyParams,
    model: &BodyModel,
    delta: f64,
) -> Result<f64> {
    let t = markers.frame_count();
    if params.frame_count() != t {
        return Err(Error::ShapeMismatch("frame counts differ".into()));
    }
    if correspondence.vertex.len() != markers.marker_count() {
        return Err(Error::ShapeMismatch("correspondence length differs".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for frame in 0..t {
        let (_, vertices) = model.forward(params, frame)?;
        for (marker, pos) in markers.visible_in_frame(frame) {
            let Some(vi) = correspondence.vertex[marker] else {
                return Err(Error::InvalidParams(format!(
                    "visible marker {marker} has no assigned vertex"
                )));
            };
            let d = (vertices[vi as usize] - pos).norm();
            sum += (d - delta) * (d - delta);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no visible markers".into()));
    }
    Ok(sum / count as f64)
}

pub struct Stage4Output {
    pub params: BodyParams,
    pub diag: StageDiag,
}

/// Stage 4: inverse kinematics with the correspondence locked. Minimizes the
/// marker-offset, shape, and pose energies over the full pose (including the
/// free global orientation), translation, and shape.
#[allow(clippy::too_many_arguments)]
pub fn stage4_ik(
    markers: &MarkerSequence,
    correspondence: &Correspondence,
    init: &BodyParams,
    theta_ref: &[FrameParams],
    theta_ref_valid: &[bool],
    beta_prior: &[f64],
    model: &BodyModel,
    config: &SolverConfig,
) -> Result<Stage4Output> {
    let t = markers.frame_count();
    let s = model.shape_count();
    let b = model.bone_count();
    if init.frame_count() != t || theta_ref.len() != t || theta_ref_valid.len() != t {
        return Err(Error::ShapeMismatch("frame counts differ".into()));
    }
    if correspondence.vertex.len() != markers.marker_count() {
        return Err(Error::ShapeMismatch("correspondence length differs".into()));
    }
    // every visible marker must be assigned before the fit starts
    for marker in 0..markers.marker_count() {
        if correspondence.vertex[marker].is_none() && markers.ever_visible(marker) {
            return Err(Error::InvalidParams(format!(
                "visible marker {marker} has no assigned vertex"
            )));
        }
    }
    let visible_total = markers.visible_total();
    if visible_total == 0 {
        return Err(Error::EmptyInput("no visible markers".into()));
    }
    let valid_frames = theta_ref_valid.iter().filter(|&&v| v).count();
    if valid_frames == 0 {
        return Err(Error::EmptyInput("pose reference has no valid frames".into()));
    }

    let cfg = &config.stage4;
    let delta = config.delta;
    let theta_coords = (b - 1) * 3;
    let frame_stride = 6 + theta_coords;

    // packing: [beta (s)] ++ per frame [phi (3), gamma (3), theta (3(b-1))]
    let mut x0 = vec![0.0; s + t * frame_stride];
    x0[..s].copy_from_slice(&init.beta);
    for (frame, fp) in init.frames.iter().enumerate() {
        let base = s + frame * frame_stride;
        x0[base] = fp.phi.x;
        x0[base + 1] = fp.phi.y;
        x0[base + 2] = fp.phi.z;
        x0[base + 3] = fp.gamma.x;
        x0[base + 4] = fp.gamma.y;
        x0[base + 5] = fp.gamma.z;
        for (j, aa) in fp.theta.iter().enumerate() {
            x0[base + 6 + 3 * j] = aa.x;
            x0[base + 6 + 3 * j + 1] = aa.y;
            x0[base + 6 + 3 * j + 2] = aa.z;
        }
    }

    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let beta = &x[..s];
        let shaped = match model.shape(beta) {
            Ok(sb) => sb,
            Err(_) => return f64::NAN,
        };
        let mut marker_sum = 0.0;
        let mut e_theta_sum = 0.0;
        let mut theta = vec![Vector3::zeros(); b - 1];
        let mut d_beta_total = vec![0.0; s];
        let theta_norm = (valid_frames * theta_coords) as f64;
        let marker_scale = 2.0 * cfg.lambda_marker / visible_total as f64;

        for frame in 0..t {
            let base = s + frame * frame_stride;
            let phi = Vector3::new(x[base], x[base + 1], x[base + 2]);
            let gamma = Vector3::new(x[base + 3], x[base + 4], x[base + 5]);
            for (j, slot) in theta.iter_mut().enumerate() {
                *slot = Vector3::new(
                    x[base + 6 + 3 * j],
                    x[base + 6 + 3 * j + 1],
                    x[base + 6 + 3 * j + 2],
                );
            }
            let root_rot = rodrigues(&phi);
            let pose = match model.pose_frame(&shaped, &root_rot, &theta) {
                Ok(p) => p,
                Err(_) => return f64::NAN,
            };
            let mut bw = FrameBackward::new(model);
            for (marker, pos) in markers.visible_in_frame(frame) {
                let vi = correspondence.vertex[marker].expect("validated above") as usize;
                let vert = model.skin_vertex(&shaped, &pose, vi) + gamma;
                let diff = vert - pos;
                let dist = diff.norm();
                marker_sum += (dist - delta) * (dist - delta);
                if dist > 1e-12 {
                    let g = diff * (marker_scale * (dist - delta) / dist);
                    bw.add_vertex_grad(model, &shaped, &pose, vi, &g);
                }
            }
            let grads = bw.finish(model, &shaped, &pose, &theta);
            let d_phi = rotation_grad_to_axis_angle(&phi, &grads.d_root_rot);
            grad[base] += d_phi.x;
            grad[base + 1] += d_phi.y;
            grad[base + 2] += d_phi.z;
            grad[base + 3] += grads.d_gamma.x;
            grad[base + 4] += grads.d_gamma.y;
            grad[base + 5] += grads.d_gamma.z;
            for (j, d) in grads.d_theta.iter().enumerate() {
                grad[base + 6 + 3 * j] += d.x;
                grad[base + 6 + 3 * j + 1] += d.y;
                grad[base + 6 + 3 * j + 2] += d.z;
            }
            for (acc, d) in d_beta_total.iter_mut().zip(&grads.d_beta) {
                *acc += d;
            }
            if theta_ref_valid[frame] {
                let scale = 2.0 * cfg.lambda_theta / theta_norm;
                for (j, slot) in theta.iter().enumerate() {
                    let diff = slot - theta_ref[frame].theta[j];
                    e_theta_sum += diff.norm_squared();
                    grad[base + 6 + 3 * j] += scale * diff.x;
                    grad[base + 6 + 3 * j + 1] += scale * diff.y;
                    grad[base + 6 + 3 * j + 2] += scale * diff.z;
                }
            }
        }
        let e_marker = marker_sum / visible_total as f64;
        let e_theta = e_theta_sum / theta_norm;
        let e_beta = shape_reg(beta, beta_prior).unwrap_or(f64::NAN);
        for (i, g) in grad[..s].iter_mut().enumerate() {
            *g += d_beta_total[i]
                + cfg.lambda_beta * 2.0 * (beta[i] - beta_prior[i]) / s.max(1) as f64;
        }
        cfg.lambda_marker * e_marker + cfg.lambda_beta * e_beta + cfg.lambda_theta * e_theta
    };

    let result = minimize(objective, &x0, &cfg.optim)?;

    let x = &result.x;
    let mut params = BodyParams {
        beta: x[..s].to_vec(),
        frames: Vec::with_capacity(t),
    };
    for frame in 0..t {
        let base = s + frame * frame_stride;
        let mut fp = FrameParams::zeros(b);
        fp.phi = Vector3::new(x[base], x[base + 1], x[base + 2]);
        fp.gamma = Vector3::new(x[base + 3], x[base + 4], x[base + 5]);
        for j in 0..b - 1 {
            fp.theta[j] = Vector3::new(
                x[base + 6 + 3 * j],
                x[base + 6 + 3 * j + 1],
                x[base + 6 + 3 * j + 2],
            );
        }
        params.frames.push(fp);
    }
    let e3d = whole_body_chamfer(markers, &params, model)?;
    Ok(Stage4Output {
        params,
        diag: StageDiag {
            iterations: result.iterations,
            status: result.status,
            objective: result.f,
            e3d,
        },
    })
}

/// Stage 5: refinement. Repeats correspondence + IK `refinement_repeats`
/// times, regularizing the pose against the incoming stage-4 output instead of
/// the prior.
pub fn stage5_refine(
    markers: &MarkerSequence,
    correspondence: &Correspondence,
    params_stage4: &BodyParams,
    prior: &Prior,
    model: &BodyModel,
    config: &SolverConfig,
) -> Result<(BodyParams, Correspondence, Vec<StageDiag>)> {
    let mut params = params_stage4.clone();
    let mut corr = correspondence.clone();
    let mut diags = Vec::new();
    let all_valid = vec![true; params.frame_count()];
    for _ in 0..config.refinement_repeats {
        corr = stage3_correspondence(markers, &params, model, &prior.valid)?;
        let theta_ref = params.frames.clone();
        let out = stage4_ik(
            markers,
            &corr,
            &params,
            &theta_ref,
            &all_valid,
            &prior.params.beta,
            model,
            config,
        )?;
        params = out.params;
        diags.push(out.diag);
    }
    Ok((params, corr, diags))
}

struct HypothesisOutcome {
    stage2: Stage2Output,
    stage4: Stage4Output,
    correspondence: Correspondence,
    selection_e3d: f64,
}

fn run_hypothesis(
    yaw_deg: f64,
    markers: &MarkerSequence,
    init: &BodyParams,
    prior: &Prior,
    model: &BodyModel,
    config: &SolverConfig,
) -> Result<HypothesisOutcome> {
    let stage2 = stage2_pose_fit(markers, init, yaw_deg.to_radians(), prior, model, config)?;
    let correspondence = stage3_correspondence(markers, &stage2.params, model, &prior.valid)?;
    let stage4 = stage4_ik(
        markers,
        &correspondence,
        &stage2.params,
        &prior.params.frames,
        &prior.valid,
        &prior.params.beta,
        model,
        config,
    )?;
    let selection_e3d = stage4.diag.e3d;
    Ok(HypothesisOutcome {
        stage2,
        stage4,
        correspondence,
        selection_e3d,
    })
}

/// Runs the full pipeline: segmentation, part localization, the yaw
/// hypotheses through stages 2-4, selection by whole-body Chamfer energy, and
/// stage-5 refinement of the winner.
pub fn solve(
    markers: &MarkerSequence,
    prior: &Prior,
    model: &BodyModel,
    config: &SolverConfig,
) -> Result<SolveResult> {
    config.validate()?;
    if prior.params.frame_count() != markers.frame_count() {
        return Err(Error::ShapeMismatch(format!(
            "prior has {} frames, markers have {}",
            prior.params.frame_count(),
            markers.frame_count()
        )));
    }
    if prior.params.beta.len() != model.shape_count() {
        return Err(Error::ShapeMismatch("prior shape coefficient count differs".into()));
    }

    // markers that never appear carry no information; drop them so the output
    // is identical to deleting them from the input
    let ever: Vec<usize> = (0..markers.marker_count())
        .filter(|&m| markers.ever_visible(m))
        .collect();
    if ever.is_empty() {
        return Err(Error::EmptyInput("no marker is ever visible".into()));
    }
    let filtered;
    let work = if ever.len() == markers.marker_count() {
        markers
    } else {
        filtered = drop_hidden_markers(markers, &ever);
        &filtered
    };

    let affinity = distance_std_affinity(work);
    let clusters = cluster_markers(&affinity, config.cluster_threshold)?;
    let localization = localize_part(work, &clusters, model, &prior.params, &config.localization)?;
    let localization_e3d = whole_body_chamfer(work, &localization.best.fitted_params, model)?;

    let init = &localization.best.fitted_params;
    let run = |&yaw_deg: &f64| run_hypothesis(yaw_deg, work, init, prior, model, config);
    let outcomes: Vec<Result<HypothesisOutcome>> = if config.parallel_hypotheses {
        config.yaw_hypotheses_deg.par_iter().map(run).collect()
    } else {
        config.yaw_hypotheses_deg.iter().map(run).collect()
    };
    let mut hypotheses = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        hypotheses.push(outcome?);
    }

    let chosen_index = hypotheses
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.selection_e3d
                .partial_cmp(&b.selection_e3d)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
        .expect("at least one hypothesis");

    let hypothesis_diags: Vec<HypothesisDiag> = config
        .yaw_hypotheses_deg
        .iter()
        .zip(&hypotheses)
        .map(|(&yaw_deg, h)| HypothesisDiag {
            yaw_deg,
            stage2: h.stage2.diag.clone(),
            stage4: h.stage4.diag.clone(),
            selection_e3d: h.selection_e3d,
        })
        .collect();

    let winner = &hypotheses[chosen_index];
    let (params, corr, stage5_diags) = stage5_refine(
        work,
        &winner.correspondence,
        &winner.stage4.params,
        prior,
        model,
        config,
    )?;

    let status = if hypotheses
        .iter()
        .any(|h| h.stage2.diag.status.converged() && h.stage4.diag.status.converged())
    {
        SolveStatus::Converged
    } else {
        SolveStatus::Partial
    };

    // expand the correspondence back to the original marker indexing
    let correspondence = if ever.len() == markers.marker_count() {
        corr
    } else {
        let mut vertex = vec![None; markers.marker_count()];
        for (filtered_idx, &orig) in ever.iter().enumerate() {
            vertex[orig] = corr.vertex[filtered_idx];
        }
        Correspondence { vertex }
    };

    let diagnostics = Diagnostics {
        localization: LocalizationDiag {
            cluster_count: localization.cluster_count,
            chain_length: localization.chain_length,
            fallback_used: localization.fallback_used,
            chain_bone_names: localization
                .best
                .chain
                .bones
                .iter()
                .map(|&b| model.bone_names[b].clone())
                .collect(),
            candidates: localization.candidates.clone(),
            e3d: localization_e3d,
        },
        hypotheses: hypothesis_diags,
        chosen_index,
        stage5: stage5_diags,
        snapshots: StageSnapshots {
            localization: (&localization.best.fitted_params).into(),
            stage2: (&winner.stage2.params).into(),
            stage4: (&winner.stage4.params).into(),
            stage5: (&params).into(),
        },
    };

    Ok(SolveResult {
        params,
        correspondence,
        chosen_yaw_deg: config.yaw_hypotheses_deg[chosen_index],
        status,
        diagnostics,
    })
}

fn drop_hidden_markers(markers: &MarkerSequence, keep: &[usize]) -> MarkerSequence {
    let t = markers.frame_count();
    let mut ids = Vec::with_capacity(keep.len());
    for &m in keep {
        ids.push(markers.marker_ids()[m].clone());
    }
    let mut positions = Vec::with_capacity(t * keep.len());
    let mut visible = Vec::with_capacity(t * keep.len());
    for frame in 0..t {
        for &m in keep {
            positions.push(markers.position(frame, m));
            visible.push(markers.is_visible(frame, m));
        }
    }
    MarkerSequence::new(ids, markers.frame_rate(), positions, visible)
        .expect("filtered sequence is valid")
}

#[cfg(test)]
mod tests;
