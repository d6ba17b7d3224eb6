//! Kinematic-chain localization: exhaustive hypothesis testing of candidate
//! chains against the clustered markers.
//!
//! The cluster count fixes the chain length. Every candidate chain is fitted
//! to all markers with a reduced iteration budget (shared shape coefficients,
//! a per-frame rigid transform, and the chain's interior joint rotations
//! free), and the chain with the minimum fitting energy wins. The winner's
//! fitted parameters initialize the main solver.

use log::warn;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, BodyParams, FrameBackward, KinematicChain};
use crate::grid::SpatialGrid;
use crate::math::{component_median, rodrigues, rotation_grad_to_axis_angle};
use crate::optim::{minimize, OptimSettings, Status};
use crate::segmentation::{ClusterAssignment, MarkerSequence};
use crate::{Error, Result};

/// Weights and optimizer settings for the per-candidate fits.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LocalizationConfig {
    pub lambda_chamfer: f64,
    pub lambda_beta: f64,
    pub optim: OptimSettings,
    /// Run candidate fits on the rayon pool.
    pub parallel_candidates: bool,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            lambda_chamfer: 10.0,
            lambda_beta: 0.1,
            optim: OptimSettings::default()
                .with_learning_rate(1.0)
                .with_max_iters(300),
            parallel_candidates: true,
        }
    }
}

/// Winning chain with its fitted parameters and energy terms.
#[derive(Debug, Clone)]
pub struct ChainFitResult {
    pub chain: KinematicChain,
    pub fitted_params: BodyParams,
    pub energy: f64,
    pub chamfer_energy: f64,
    pub shape_energy: f64,
}

/// Energy-table row for one evaluated candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateEnergy {
    pub bones: Vec<usize>,
    pub bone_names: Vec<String>,
    pub energy: f64,
    pub chamfer_energy: f64,
    pub shape_energy: f64,
    pub iterations: usize,
    pub status: Status,
}

/// Everything `localize_part` produces: the winner plus the full energy table.
#[derive(Debug, Clone)]
pub struct LocalizationOutcome {
    pub best: ChainFitResult,
    pub candidates: Vec<CandidateEnergy>,
    pub cluster_count: usize,
    pub chain_length: usize,
    pub fallback_used: bool,
}

/// Single-directional Chamfer energy: mean over visible (frame, marker) pairs
/// of the squared distance to the nearest track point in that frame.
pub fn chamfer_one_way(markers: &MarkerSequence, vertex_tracks: &[Vec<Vector3<f64>>]) -> Result<f64> {
    if vertex_tracks.len() != markers.frame_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} track frames for {} marker frames",
            vertex_tracks.len(),
            markers.frame_count()
        )));
    }
    if vertex_tracks.iter().any(|f| f.is_empty()) {
        return Err(Error::EmptyInput("empty vertex set in chamfer".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, track) in vertex_tracks.iter().enumerate() {
        let frame = chamfer_frame(markers, t, track);
        sum += frame.sum_sq;
        count += frame.visible;
    }
    if count == 0 {
        return Err(Error::EmptyInput("no visible markers in chamfer".into()));
    }
    Ok(sum / count as f64)
}

/// Mean squared difference between shape coefficients.
pub fn shape_reg(beta_hat: &[f64], beta_prior: &[f64]) -> Result<f64> {
    if beta_hat.len() != beta_prior.len() {
        return Err(Error::ShapeMismatch(format!(
            "beta lengths differ: {} vs {}",
            beta_hat.len(),
            beta_prior.len()
        )));
    }
    if beta_hat.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = beta_hat
        .iter()
        .zip(beta_prior)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / beta_hat.len() as f64)
}

/// Per-frame translation offsets aligning the vertex tracks to the markers:
/// componentwise median of visible marker positions minus componentwise median
/// of the track positions. Frames without visible markers carry the offset of
/// the nearest valid frame (earlier frame on ties).
pub fn align_median(
    markers: &MarkerSequence,
    vertex_tracks: &[Vec<Vector3<f64>>],
) -> Result<Vec<Vector3<f64>>> {
    if vertex_tracks.len() != markers.frame_count() {
        return Err(Error::ShapeMismatch("track/marker frame counts differ".into()));
    }
    let t = markers.frame_count();
    let mut offsets: Vec<Option<Vector3<f64>>> = vec![None; t];
    for frame in 0..t {
        let visible: Vec<Vector3<f64>> = markers.visible_in_frame(frame).map(|(_, p)| p).collect();
        if visible.is_empty() {
            continue;
        }
        if vertex_tracks[frame].is_empty() {
            return Err(Error::EmptyInput(format!("no track points in frame {frame}")));
        }
        offsets[frame] = Some(component_median(&visible) - component_median(&vertex_tracks[frame]));
    }
    if offsets.iter().all(|o| o.is_none()) {
        return Err(Error::EmptyInput("no frame has a visible marker".into()));
    }
    let filled: Vec<Vector3<f64>> = (0..t)
        .map(|frame| {
            if let Some(o) = offsets[frame] {
                return o;
            }
            // nearest valid frame, earlier side on ties
            let mut best: Option<(usize, Vector3<f64>)> = None;
            for (other, offset) in offsets.iter().enumerate() {
                if let Some(o) = offset {
                    let dist = frame.abs_diff(other);
                    let better = match best {
                        None => true,
                        Some((bd, _)) => dist < bd,
                    };
                    if better {
                        best = Some((dist, *o));
                    }
                }
            }
            best.unwrap().1
        })
        .collect();
    Ok(filled)
}

/// Per-frame nearest-neighbor matches for the Chamfer term.
pub(crate) struct FrameChamfer {
    pub sum_sq: f64,
    pub visible: usize,
    /// (marker index, track point index) for every visible marker
    pub matches: Vec<(usize, usize)>,
}

pub(crate) fn chamfer_frame(
    markers: &MarkerSequence,
    frame: usize,
    positions: &[Vector3<f64>],
) -> FrameChamfer {
    let mut out = FrameChamfer {
        sum_sq: 0.0,
        visible: 0,
        matches: Vec::new(),
    };
    if positions.is_empty() {
        return out;
    }
    let grid = SpatialGrid::build(positions);
    for (marker, pos) in markers.visible_in_frame(frame) {
        let (idx, d2) = grid.nearest(&pos);
        out.sum_sq += d2;
        out.visible += 1;
        out.matches.push((marker, idx));
    }
    out
}

struct CandidateFit {
    result: ChainFitResult,
    iterations: usize,
    status: Status,
}

/// Finds the best-matching kinematic chain for the clustered markers.
///
/// The chain length is the cluster count; when the hierarchy has no chain that
/// long, the longest available length is used instead (with a warning).
pub fn localize_part(
    markers: &MarkerSequence,
    clusters: &ClusterAssignment,
    model: &BodyModel,
    prior: &BodyParams,
    config: &LocalizationConfig,
) -> Result<LocalizationOutcome> {
    if prior.frame_count() != markers.frame_count() {
        return Err(Error::ShapeMismatch(format!(
            "prior has {} frames, markers have {}",
            prior.frame_count(),
            markers.frame_count()
        )));
    }
    if markers.visible_total() == 0 {
        return Err(Error::EmptyInput("no visible markers".into()));
    }
    config.optim.validate()?;

    let requested = clusters.cluster_count;
    let mut chain_length = requested.min(model.bone_count());
    let mut fallback_used = chain_length != requested;
    let mut chains = model.enumerate_chains(chain_length)?;
    while chains.is_empty() && chain_length > 1 {
        chain_length -= 1;
        chains = model.enumerate_chains(chain_length)?;
        fallback_used = true;
    }
    if fallback_used {
        warn!(
            "no kinematic chain of length {requested}; falling back to length {chain_length}"
        );
    }
    if chains.is_empty() {
        return Err(Error::InvalidModel("hierarchy yields no chains".into()));
    }

    let fit_one = |chain: &KinematicChain| -> Result<CandidateFit> {
        fit_candidate(markers, model, prior, chain, config)
    };
    let fits: Vec<Result<CandidateFit>> = if config.parallel_candidates {
        chains.par_iter().map(fit_one).collect()
    } else {
        chains.iter().map(fit_one).collect()
    };

    let mut candidates = Vec::with_capacity(fits.len());
    let mut best: Option<(usize, CandidateFit)> = None;
    for (idx, fit) in fits.into_iter().enumerate() {
        let fit = fit?;
        candidates.push(CandidateEnergy {
            bones: fit.result.chain.bones.clone(),
            bone_names: fit
                .result
                .chain
                .bones
                .iter()
                .map(|&b| model.bone_names[b].clone())
                .collect(),
            energy: fit.result.energy,
            chamfer_energy: fit.result.chamfer_energy,
            shape_energy: fit.result.shape_energy,
            iterations: fit.iterations,
            status: fit.status,
        });
        let better = match &best {
            None => true,
            Some((_, current)) => fit.result.energy < current.result.energy,
        };
        if better {
            best = Some((idx, fit));
        }
    }
    let (_, winner) = best.expect("at least one candidate");
    Ok(LocalizationOutcome {
        best: winner.result,
        candidates,
        cluster_count: clusters.cluster_count,
        chain_length,
        fallback_used,
    })
}

/// Fits one candidate chain. Free variables: shared shape coefficients, and
/// per frame a rigid transform of the whole body (a pre-rotation composed onto
/// the prior's global orientation, plus translation) together with the chain's
/// interior joint rotations. All other joints stay at the prior pose, which
/// isolates the hypothesis being tested.
fn fit_candidate(
    markers: &MarkerSequence,
    model: &BodyModel,
    prior: &BodyParams,
    chain: &KinematicChain,
    config: &LocalizationConfig,
) -> Result<CandidateFit> {
    let t = markers.frame_count();
    let s = model.shape_count();
    let subset = model.part_vertices(&chain.bones)?;
    if subset.is_empty() {
        // a chain of bones that dominate no vertices cannot be fit
        return Ok(CandidateFit {
            result: ChainFitResult {
                chain: chain.clone(),
                fitted_params: prior.clone(),
                energy: f64::INFINITY,
                chamfer_energy: f64::INFINITY,
                shape_energy: 0.0,
            },
            iterations: 0,
            status: Status::LineSearchFailure,
        });
    }
    // joints whose rotations are free: interior chain bones (the chain root's
    // orientation freedom is subsumed by the per-frame rigid rotation)
    let free_joints: Vec<usize> = chain.bones[1..].to_vec();

    // median alignment from the prior-posed candidate vertices
    let mut tracks = Vec::with_capacity(t);
    for frame in 0..t {
        let (_, vertices) = model.forward(prior, frame)?;
        tracks.push(subset.iter().map(|&v| vertices[v]).collect::<Vec<_>>());
    }
    let offsets = align_median(markers, &tracks)?;

    // packing: [beta (s)] ++ per frame [rot (3), gamma (3), chain thetas]
    let frame_stride = 6 + 3 * free_joints.len();
    let mut x0 = vec![0.0; s + t * frame_stride];
    x0[..s].copy_from_slice(&prior.beta);
    for frame in 0..t {
        let base = s + frame * frame_stride;
        let gamma_init = prior.frames[frame].gamma + offsets[frame];
        x0[base + 3] = gamma_init.x;
        x0[base + 4] = gamma_init.y;
        x0[base + 5] = gamma_init.z;
        for (k, &joint) in free_joints.iter().enumerate() {
            let aa = prior.frames[frame].theta[joint - 1];
            x0[base + 6 + 3 * k] = aa.x;
            x0[base + 6 + 3 * k + 1] = aa.y;
            x0[base + 6 + 3 * k + 2] = aa.z;
        }
    }

    let prior_root_rot: Vec<Matrix3<f64>> =
        prior.frames.iter().map(|f| rodrigues(&f.phi)).collect();
    let lambda_3d = config.lambda_chamfer;
    let lambda_beta = config.lambda_beta;
    let visible_total = markers.visible_total() as f64;

    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let beta = &x[..s];
        let shaped = match model.shape(beta) {
            Ok(sb) => sb,
            Err(_) => return f64::NAN,
        };
        let mut chamfer_sum = 0.0;
        let mut theta = prior.frames[0].theta.clone();
        let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(subset.len());
        let mut d_beta_total = vec![0.0; s];
        for frame in 0..t {
            let base = s + frame * frame_stride;
            let rot_aa = Vector3::new(x[base], x[base + 1], x[base + 2]);
            let gamma = Vector3::new(x[base + 3], x[base + 4], x[base + 5]);
            theta.copy_from_slice(&prior.frames[frame].theta);
            for (k, &joint) in free_joints.iter().enumerate() {
                theta[joint - 1] = Vector3::new(
                    x[base + 6 + 3 * k],
                    x[base + 6 + 3 * k + 1],
                    x[base + 6 + 3 * k + 2],
                );
            }
            let pre_rot = rodrigues(&rot_aa);
            let root_rot = pre_rot * prior_root_rot[frame];
            let pose = match model.pose_frame(&shaped, &root_rot, &theta) {
                Ok(p) => p,
                Err(_) => return f64::NAN,
            };
            positions.clear();
            positions.extend(
                subset
                    .iter()
                    .map(|&v| model.skin_vertex(&shaped, &pose, v) + gamma),
            );
            let fc = chamfer_frame(markers, frame, &positions);
            chamfer_sum += fc.sum_sq;

            // backward: chamfer cotangents on the matched vertices
            let mut bw = FrameBackward::new(model);
            let scale = 2.0 * lambda_3d / visible_total;
            for &(marker, pos_idx) in &fc.matches {
                let diff = positions[pos_idx] - markers.position(frame, marker);
                bw.add_vertex_grad(model, &shaped, &pose, subset[pos_idx], &(diff * scale));
            }
            let grads = bw.finish(model, &shaped, &pose, &theta);
            // rigid pre-rotation: dL/d(pre_rot) = d_root_rot * prior_rot^T
            let d_pre = grads.d_root_rot * prior_root_rot[frame].transpose();
            let d_rot_aa = rotation_grad_to_axis_angle(&rot_aa, &d_pre);
            grad[base] += d_rot_aa.x;
            grad[base + 1] += d_rot_aa.y;
            grad[base + 2] += d_rot_aa.z;
            grad[base + 3] += grads.d_gamma.x;
            grad[base + 4] += grads.d_gamma.y;
            grad[base + 5] += grads.d_gamma.z;
            for (k, &joint) in free_joints.iter().enumerate() {
                let d = grads.d_theta[joint - 1];
                grad[base + 6 + 3 * k] += d.x;
                grad[base + 6 + 3 * k + 1] += d.y;
                grad[base + 6 + 3 * k + 2] += d.z;
            }
            for (acc, d) in d_beta_total.iter_mut().zip(&grads.d_beta) {
                *acc += d;
            }
        }
        let e_chamfer = chamfer_sum / visible_total;
        let e_beta = shape_reg(beta, &prior.beta).unwrap_or(f64::NAN);
        for (i, g) in grad[..s].iter_mut().enumerate() {
            *g += d_beta_total[i]
                + lambda_beta * 2.0 * (beta[i] - prior.beta[i]) / s.max(1) as f64;
        }
        lambda_3d * e_chamfer + lambda_beta * e_beta
    };

    let result = minimize(objective, &x0, &config.optim)?;

    // unpack the solution and fold the rigid transform into the parameters
    let x = &result.x;
    let beta = x[..s].to_vec();
    let mut fitted = BodyParams {
        beta,
        frames: prior.frames.clone(),
    };
    for frame in 0..t {
        let base = s + frame * frame_stride;
        let rot_aa = Vector3::new(x[base], x[base + 1], x[base + 2]);
        fitted.frames[frame].phi = crate::math::compose_axis_angle(&rot_aa, &prior.frames[frame].phi);
        fitted.frames[frame].gamma = Vector3::new(x[base + 3], x[base + 4], x[base + 5]);
        for (k, &joint) in free_joints.iter().enumerate() {
            fitted.frames[frame].theta[joint - 1] = Vector3::new(
                x[base + 6 + 3 * k],
                x[base + 6 + 3 * k + 1],
                x[base + 6 + 3 * k + 2],
            );
        }
    }

    // recompute the energy terms at the solution for the report
    let mut tracks = Vec::with_capacity(t);
    for frame in 0..t {
        let (_, vertices) = model.forward(&fitted, frame)?;
        tracks.push(subset.iter().map(|&v| vertices[v]).collect::<Vec<_>>());
    }
    let chamfer_energy = chamfer_one_way(markers, &tracks)?;
    let shape_energy = shape_reg(&fitted.beta, &prior.beta)?;
    Ok(CandidateFit {
        result: ChainFitResult {
            chain: chain.clone(),
            fitted_params: fitted,
            energy: config.lambda_chamfer * chamfer_energy + config.lambda_beta * shape_energy,
            chamfer_energy,
            shape_energy,
        },
        iterations: result.iterations,
        status: result.status,
    })
}
