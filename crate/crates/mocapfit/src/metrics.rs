//! Evaluation metrics for comparing a solved body against a reference.
//!
//! All metrics report millimeters (MPJVE: millimeters per second) and are
//! invariant under a global rigid transform applied identically to both
//! prediction and reference.

use log::warn;
use nalgebra::Vector3;

use crate::math::{closest_point_on_triangle, triangle_area};
use crate::segmentation::MarkerSequence;
use crate::{Error, Result};

const M_TO_MM: f64 = 1000.0;

/// Mean per-joint position error, millimeters.
pub fn mpjpe(pred_joints: &[Vec<Vector3<f64>>], ref_joints: &[Vec<Vector3<f64>>]) -> Result<f64> {
    check_shapes(pred_joints, ref_joints, "joints")?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pf, rf) in pred_joints.iter().zip(ref_joints) {
        for (p, r) in pf.iter().zip(rf) {
            sum += (p - r).norm();
            count += 1;
        }
    }
    Ok(sum / count as f64 * M_TO_MM)
}

/// Mean per-joint velocity error, millimeters per second. Velocities are
/// finite differences of adjacent frames scaled by the frame rate; the error
/// is the Euclidean norm of the velocity-vector difference.
pub fn mpjve(
    pred_joints: &[Vec<Vector3<f64>>],
    ref_joints: &[Vec<Vector3<f64>>],
    frame_rate: f64,
) -> Result<f64> {
    check_shapes(pred_joints, ref_joints, "joints")?;
    if pred_joints.len() < 2 {
        return Err(Error::InvalidParams(
            "velocity error needs at least two frames".into(),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..pred_joints.len() - 1 {
        for j in 0..pred_joints[t].len() {
            let pv = (pred_joints[t + 1][j] - pred_joints[t][j]) * frame_rate;
            let rv = (ref_joints[t + 1][j] - ref_joints[t][j]) * frame_rate;
            sum += (pv - rv).norm();
            count += 1;
        }
    }
    Ok(sum / count as f64 * M_TO_MM)
}

/// Vertex-to-vertex error between same-topology meshes, millimeters.
pub fn v2v(pred_vertices: &[Vec<Vector3<f64>>], ref_vertices: &[Vec<Vector3<f64>>]) -> Result<f64> {
    check_shapes(pred_vertices, ref_vertices, "vertices")?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pf, rf) in pred_vertices.iter().zip(ref_vertices) {
        for (p, r) in pf.iter().zip(rf) {
            sum += (p - r).norm();
            count += 1;
        }
    }
    Ok(sum / count as f64 * M_TO_MM)
}

/// Marker-to-surface distance, millimeters: mean over visible (frame, marker)
/// pairs of the exact point-to-triangle distance to the posed mesh.
/// Degenerate (zero-area) triangles are skipped with a warning.
pub fn m2s(
    markers: &MarkerSequence,
    vertices: &[Vec<Vector3<f64>>],
    faces: &[[u32; 3]],
) -> Result<f64> {
    if vertices.len() != markers.frame_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} mesh frames for {} marker frames",
            vertices.len(),
            markers.frame_count()
        )));
    }
    if faces.is_empty() {
        return Err(Error::EmptyInput("mesh has no faces".into()));
    }
    let mut degenerate_warned = false;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, frame_vertices) in vertices.iter().enumerate() {
        for (_, marker) in markers.visible_in_frame(t) {
            let mut best = f64::INFINITY;
            for face in faces {
                let a = &frame_vertices[face[0] as usize];
                let b = &frame_vertices[face[1] as usize];
                let c = &frame_vertices[face[2] as usize];
                if triangle_area(a, b, c) <= 1e-14 {
                    if !degenerate_warned {
                        warn!("skipping degenerate triangle(s) in m2s");
                        degenerate_warned = true;
                    }
                    continue;
                }
                let (_, d2) = closest_point_on_triangle(&marker, a, b, c);
                if d2 < best {
                    best = d2;
                }
            }
            if best.is_finite() {
                sum += best.sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no visible markers for m2s".into()));
    }
    Ok(sum / count as f64 * M_TO_MM)
}

fn check_shapes<T>(pred: &[Vec<T>], reference: &[Vec<T>], what: &str) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frame counts differ: {} vs {}",
            what,
            pred.len(),
            reference.len()
        )));
    }
    for (t, (p, r)) in pred.iter().zip(reference).enumerate() {
        if p.len() != r.len() {
            return Err(Error::ShapeMismatch(format!(
                "{what} count differs at frame {t}: {} vs {}",
                p.len(),
                r.len()
            )));
        }
    }
    if pred.is_empty() || pred[0].is_empty() {
        return Err(Error::EmptyInput(format!("no {what} to compare")));
    }
    Ok(())
}
