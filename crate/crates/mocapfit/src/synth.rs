//! Synthetic data generation: surface-sampled marker layouts, marker
//! animation at a fixed skin offset, tracking-loss simulation, and prior
//! perturbation. Everything is seed-deterministic.

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, BodyParams};
use crate::math::{compose_axis_angle, triangle_area, UpAxis};
use crate::segmentation::MarkerSequence;
use crate::{Error, Result};

/// Skin offset used when constructing markers, meters.
pub const MARKER_OFFSET: f64 = 0.0095;

/// One surface-attached marker: a triangle, barycentric coordinates within it,
/// and an offset along the posed triangle normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedMarker {
    pub triangle: u32,
    pub barycentric: [f64; 3],
    pub normal_offset: f64,
}

/// A marker layout fixed to the body surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerPlacement {
    pub markers: Vec<PlacedMarker>,
}

impl MarkerPlacement {
    /// First `n` markers of this layout. Layouts are generated marker by
    /// marker from one RNG stream, so truncation yields the nested layouts.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            markers: self.markers[..n.min(self.markers.len())].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }
}

/// Samples `n_markers` positions on the template surface, triangles chosen
/// with probability proportional to area, uniform within each triangle.
pub fn sample_layout(model: &BodyModel, n_markers: usize, seed: u64) -> Result<MarkerPlacement> {
    let all: Vec<u32> = (0..model.faces.len() as u32).collect();
    sample_layout_on(model, &all, n_markers, seed)
}

/// Like [`sample_layout`] restricted to a face subset (e.g. one body part).
pub fn sample_layout_on(
    model: &BodyModel,
    faces: &[u32],
    n_markers: usize,
    seed: u64,
) -> Result<MarkerPlacement> {
    if n_markers == 0 {
        return Err(Error::InvalidParams("layout needs at least one marker".into()));
    }
    if faces.is_empty() {
        return Err(Error::EmptyInput("no faces to sample".into()));
    }
    let mut cumulative = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for &f in faces {
        let [a, b, c] = model.faces[f as usize];
        total += triangle_area(
            &model.template_vertices[a as usize],
            &model.template_vertices[b as usize],
            &model.template_vertices[c as usize],
        );
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::InvalidModel("surface has zero area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut markers = Vec::with_capacity(n_markers);
    let mut attempts = 0usize;
    while markers.len() < n_markers {
        attempts += 1;
        if attempts > 500 * n_markers {
            return Err(Error::InvalidModel(
                "could not place markers with full skin clearance".into(),
            ));
        }
        let pick = rng.gen_range(0.0..total);
        let idx = cumulative.partition_point(|&c| c <= pick).min(faces.len() - 1);
        // uniform barycentric sample via the square-root trick
        let r1: f64 = rng.gen();
        let r2: f64 = rng.gen();
        let sqrt_r1 = r1.sqrt();
        let marker = PlacedMarker {
            triangle: faces[idx],
            barycentric: [1.0 - sqrt_r1, sqrt_r1 * (1.0 - r2), sqrt_r1 * r2],
            normal_offset: MARKER_OFFSET,
        };
        // keep only placements whose offset point retains its full clearance;
        // surface patches buried inside a neighboring capsule or facing a
        // crease are not places a physical marker could sit
        let [ia, ib, ic] = model.faces[marker.triangle as usize];
        let (a, b, c) = (
            model.template_vertices[ia as usize],
            model.template_vertices[ib as usize],
            model.template_vertices[ic as usize],
        );
        let q = a * marker.barycentric[0] + b * marker.barycentric[1] + c * marker.barycentric[2];
        let normal = (b - a).cross(&(c - a));
        if normal.norm() < 1e-14 {
            continue;
        }
        let p = q + normal * (marker.normal_offset / normal.norm());
        let clearance =
            crate::math::point_to_mesh_distance(&p, &model.template_vertices, &model.faces);
        if clearance >= 0.95 * marker.normal_offset {
            markers.push(marker);
        }
    }
    Ok(MarkerPlacement { markers })
}

/// Faces whose vertices all belong (by maximal skinning weight) to `bones`.
pub fn part_faces(model: &BodyModel, bones: &[usize]) -> Vec<u32> {
    model
        .faces
        .iter()
        .enumerate()
        .filter(|(_, face)| {
            face.iter()
                .all(|&v| bones.contains(&model.dominant_bone(v as usize)))
        })
        .map(|(i, _)| i as u32)
        .collect()
}

/// Animates a placement across the posed frames of `params_gt`: each marker is
/// its barycentric point on the posed triangle plus the offset along the posed
/// outward normal. All markers are visible.
pub fn animate_markers(
    model: &BodyModel,
    params_gt: &BodyParams,
    placement: &MarkerPlacement,
    frame_rate: f64,
) -> Result<MarkerSequence> {
    let t = params_gt.frame_count();
    let m = placement.len();
    let mut positions = Vec::with_capacity(t * m);
    for frame in 0..t {
        let (_, vertices) = model.forward(params_gt, frame)?;
        for marker in &placement.markers {
            let [ia, ib, ic] = model.faces[marker.triangle as usize];
            let (a, b, c) = (
                vertices[ia as usize],
                vertices[ib as usize],
                vertices[ic as usize],
            );
            let point =
                a * marker.barycentric[0] + b * marker.barycentric[1] + c * marker.barycentric[2];
            let normal = (b - a).cross(&(c - a));
            let norm = normal.norm();
            if norm < 1e-14 {
                return Err(Error::InvalidModel(format!(
                    "degenerate posed triangle {}",
                    marker.triangle
                )));
            }
            positions.push(point + normal * (marker.normal_offset / norm));
        }
    }
    let ids = (0..m).map(|i| format!("m{i:03}")).collect();
    MarkerSequence::new(ids, frame_rate, positions, vec![true; t * m])
}

/// Simulated tracking loss: each frame, each visible marker independently
/// begins a hidden interval of `duration_frames` with probability `p`.
/// Markers already hidden do not start new intervals.
pub fn dropout(
    markers: &MarkerSequence,
    per_frame_probability: f64,
    duration_frames: usize,
    seed: u64,
) -> Result<MarkerSequence> {
    if !(0.0..=1.0).contains(&per_frame_probability) {
        return Err(Error::InvalidParams("dropout probability must be in [0, 1]".into()));
    }
    let t = markers.frame_count();
    let m = markers.marker_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden_until = vec![0usize; m];
    let mut visible = Vec::with_capacity(t * m);
    for frame in 0..t {
        for marker in 0..m {
            let was_visible = markers.is_visible(frame, marker);
            if hidden_until[marker] > frame {
                visible.push(false);
                continue;
            }
            if was_visible && per_frame_probability > 0.0 && rng.gen::<f64>() < per_frame_probability
            {
                hidden_until[marker] = frame + duration_frames;
                visible.push(false);
                continue;
            }
            visible.push(was_visible);
        }
    }
    MarkerSequence::new(
        markers.marker_ids().to_vec(),
        markers.frame_rate(),
        markers.raw_positions().to_vec(),
        visible,
    )
}

/// Yaw offset applied to a prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum YawSpec {
    /// Fixed offset, radians.
    Fixed(f64),
    /// One draw from the given set, radians.
    RandomFrom(Vec<f64>),
}

/// Perturbation applied to ground-truth parameters to synthesize a prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-coordinate angular noise on joint rotations, radians.
    pub sigma_theta: f64,
    /// Per-coefficient shape noise.
    pub sigma_beta: f64,
    pub yaw: YawSpec,
    /// Zero out the global translation (monocular priors have none).
    pub invalidate_translation: bool,
    /// Half-open frame ranges marked as tracking gaps.
    pub gap_intervals: Vec<(usize, usize)>,
    pub up_axis: UpAxis,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_theta: 5.0_f64.to_radians(),
            sigma_beta: 0.2,
            yaw: YawSpec::RandomFrom(vec![
                0.0,
                90.0_f64.to_radians(),
                180.0_f64.to_radians(),
                270.0_f64.to_radians(),
            ]),
            invalidate_translation: true,
            gap_intervals: Vec::new(),
            up_axis: UpAxis::Y,
        }
    }
}

/// Perturbed prior: parameters plus a per-frame presence mask (false inside
/// tracking gaps) and the yaw offset that was applied.
#[derive(Debug, Clone)]
pub struct PerturbedPrior {
    pub params: BodyParams,
    pub present: Vec<bool>,
    pub applied_yaw: f64,
}

/// Applies `noise_spec` to ground-truth parameters.
pub fn perturb_prior(params_gt: &BodyParams, noise_spec: &NoiseSpec, seed: u64) -> PerturbedPrior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = match &noise_spec.yaw {
        YawSpec::Fixed(angle) => *angle,
        YawSpec::RandomFrom(set) => {
            if set.is_empty() {
                0.0
            } else {
                set[rng.gen_range(0..set.len())]
            }
        }
    };
    let mut params = params_gt.clone();
    if noise_spec.sigma_beta > 0.0 {
        let normal = Normal::new(0.0, noise_spec.sigma_beta).unwrap();
        for b in &mut params.beta {
            *b += normal.sample(&mut rng);
        }
    }
    let theta_noise = if noise_spec.sigma_theta > 0.0 {
        Some(Normal::new(0.0, noise_spec.sigma_theta).unwrap())
    } else {
        None
    };
    let yaw_aa = noise_spec.up_axis.vector() * yaw;
    for frame in &mut params.frames {
        if let Some(n) = &theta_noise {
            for t in &mut frame.theta {
                for c in 0..3 {
                    t[c] += n.sample(&mut rng);
                }
            }
        }
        if yaw != 0.0 {
            frame.phi = compose_axis_angle(&yaw_aa, &frame.phi);
        }
        if noise_spec.invalidate_translation {
            frame.gamma = Vector3::zeros();
        }
    }
    let mut present = vec![true; params.frame_count()];
    for &(start, end) in &noise_spec.gap_intervals {
        for p in present.iter_mut().take(end.min(params.frame_count())).skip(start) {
            *p = false;
        }
    }
    PerturbedPrior {
        params,
        present,
        applied_yaw: yaw,
    }
}

/// Bundled procedural ground-truth motions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Walk,
    Squat,
    ArmRaise,
    Static,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk" => Ok(Scenario::Walk),
            "squat" => Ok(Scenario::Squat),
            "arm_raise" => Ok(Scenario::ArmRaise),
            "static" => Ok(Scenario::Static),
            other => Err(Error::InvalidParams(format!(
                "unknown scenario '{other}' (walk|squat|arm_raise|static)"
            ))),
        }
    }
}

fn bone(model: &BodyModel, name: &str) -> usize {
    model.bone_index(name).expect("humanoid bone name")
}

/// Ground-truth motion for a scenario. The seed draws the shape coefficients
/// and a phase offset; the trajectory itself is a fixed procedural curve.
pub fn scenario_motion(
    scenario: Scenario,
    model: &BodyModel,
    frames: usize,
    frame_rate: f64,
    seed: u64,
) -> BodyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_a21f);
    let beta_normal = Normal::new(0.0, 0.15).unwrap();
    let mut params = BodyParams::zeros(model.shape_count(), model.bone_count(), frames);
    for b in &mut params.beta {
        let draw: f64 = beta_normal.sample(&mut rng);
        *b = draw.clamp(-0.35, 0.35);
    }
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let l_hip = bone(model, "left_hip") - 1;
    let r_hip = bone(model, "right_hip") - 1;
    let l_knee = bone(model, "left_knee") - 1;
    let r_knee = bone(model, "right_knee") - 1;
    let l_ankle = bone(model, "left_ankle") - 1;
    let r_ankle = bone(model, "right_ankle") - 1;
    let l_shoulder = bone(model, "left_shoulder") - 1;
    let r_shoulder = bone(model, "right_shoulder") - 1;
    let l_elbow = bone(model, "left_elbow") - 1;
    let r_elbow = bone(model, "right_elbow") - 1;
    let spine1 = bone(model, "spine1") - 1;
    let spine2 = bone(model, "spine2") - 1;

    for (i, frame) in params.frames.iter_mut().enumerate() {
        let t = i as f64 / frame_rate;
        match scenario {
            Scenario::Walk => {
                let omega = std::f64::consts::TAU / 1.2; // 1.2 s stride cycle
                let cycle = omega * t + phase;
                frame.theta[l_hip].x = 0.45 * cycle.sin();
                frame.theta[r_hip].x = 0.45 * (cycle + std::f64::consts::PI).sin();
                frame.theta[l_knee].x = 0.30 * (1.0 - (cycle - 0.9).cos()) / 2.0 + 0.05;
                frame.theta[r_knee].x =
                    0.30 * (1.0 - (cycle + std::f64::consts::PI - 0.9).cos()) / 2.0 + 0.05;
                frame.theta[l_ankle].x = 0.12 * (cycle + 1.2).sin();
                frame.theta[r_ankle].x = 0.12 * (cycle + std::f64::consts::PI + 1.2).sin();
                frame.theta[l_shoulder].y = -0.35 * (cycle + std::f64::consts::PI).sin();
                frame.theta[r_shoulder].y = 0.35 * (cycle + std::f64::consts::PI).sin();
                frame.theta[l_elbow].y = -0.25 - 0.15 * (cycle + std::f64::consts::PI).sin();
                frame.theta[r_elbow].y = 0.25 - 0.15 * (cycle + std::f64::consts::PI).sin();
                frame.theta[spine1].y = 0.08 * cycle.sin();
                frame.gamma = Vector3::new(
                    0.015 * cycle.sin(),
                    0.02 * (2.0 * cycle).sin(),
                    0.5 * t,
                );
            }
            Scenario::Squat => {
                let omega = std::f64::consts::TAU / 2.4;
                let s = (1.0 - (omega * t + phase).cos()) / 2.0;
                frame.theta[l_hip].x = -0.85 * s;
                frame.theta[r_hip].x = -0.85 * s;
                frame.theta[l_knee].x = 1.25 * s;
                frame.theta[r_knee].x = 1.25 * s;
                frame.theta[l_ankle].x = -0.35 * s;
                frame.theta[r_ankle].x = -0.35 * s;
                frame.theta[spine1].x = -0.25 * s;
                frame.theta[l_shoulder].y = -0.9 * s;
                frame.theta[r_shoulder].y = 0.9 * s;
                frame.gamma = Vector3::new(0.0, -0.28 * s, 0.0);
            }
            Scenario::ArmRaise => {
                let omega = std::f64::consts::TAU / 3.0;
                let s = (1.0 - (omega * t + phase).cos()) / 2.0;
                frame.theta[l_shoulder].z = 1.2 * s;
                frame.theta[r_shoulder].z = -1.2 * s;
                frame.theta[l_elbow].z = 0.3 * s;
                frame.theta[r_elbow].z = -0.3 * s;
                frame.theta[spine2].x = -0.08 * s;
                frame.gamma = Vector3::new(0.0, 0.01 * s, 0.0);
            }
            Scenario::Static => {
                let omega = std::f64::consts::TAU / 4.0;
                let sway = (omega * t + phase).sin();
                frame.theta[spine1].x = 0.05 * sway;
                frame.theta[l_shoulder].y = -0.06 * sway;
                frame.theta[r_shoulder].y = 0.06 * sway;
                frame.gamma = Vector3::new(0.008 * sway, 0.0, 0.0);
            }
        }
    }
    params
}
