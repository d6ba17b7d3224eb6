//! Parametric articulated body: forward kinematics, linear blend skinning,
//! shape blending, part-vertex membership, and kinematic-chain enumeration.
//!
//! The model is immutable after construction and safe to share across threads.
//! Every quantity produced here is differentiable with respect to the body
//! parameters; [`FrameBackward`] implements the reverse pass used by all
//! solver objectives.

pub mod procedural;
#[cfg(test)]
pub(crate) mod test_models;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::math::{rodrigues, rotation_grad_to_axis_angle};
use crate::{Error, Result};

/// Articulated body model with a triangle skin.
#[derive(Debug, Clone)]
pub struct BodyModel {
    pub bone_names: Vec<String>,
    /// Parent bone index per bone; `None` marks the single root. Topologically
    /// ordered: every parent index is smaller than its child's index.
    pub parents: Vec<Option<usize>>,
    pub template_vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub rest_joints: Vec<Vector3<f64>>,
    /// Dense skinning weights, row-major `V x B`; each row sums to one.
    pub lbs_weights: Vec<f64>,
    /// Per-coefficient vertex displacement directions, `S x V`.
    pub shape_basis: Vec<Vec<Vector3<f64>>>,
    /// Per-coefficient rest-joint displacement directions, `S x B`.
    pub joint_shape_basis: Vec<Vec<Vector3<f64>>>,
    /// Named bone groups (ordered bone-name lists).
    pub part_table: BTreeMap<String, Vec<String>>,

    // Derived at construction.
    sparse_weights: Vec<Vec<(u32, f64)>>,
    vertex_dominant_bone: Vec<u32>,
    children: Vec<Vec<usize>>,
}

/// Shape and per-frame pose parameters for a marker sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    /// Shape coefficients, one set per sequence.
    pub beta: Vec<f64>,
    pub frames: Vec<FrameParams>,
}

/// Pose of a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParams {
    /// Global orientation, axis-angle.
    pub phi: Vector3<f64>,
    /// Joint rotations, axis-angle, one per non-root bone (bone `b` at `theta[b-1]`).
    pub theta: Vec<Vector3<f64>>,
    /// Global translation, meters.
    pub gamma: Vector3<f64>,
}

impl FrameParams {
    pub fn zeros(bones: usize) -> Self {
        Self {
            phi: Vector3::zeros(),
            theta: vec![Vector3::zeros(); bones - 1],
            gamma: Vector3::zeros(),
        }
    }
}

impl BodyParams {
    pub fn zeros(shape_count: usize, bones: usize, frames: usize) -> Self {
        Self {
            beta: vec![0.0; shape_count],
            frames: vec![FrameParams::zeros(bones); frames],
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().all(|v| v.is_finite())
            && self.frames.iter().all(|f| {
                f.phi.iter().all(|v| v.is_finite())
                    && f.gamma.iter().all(|v| v.is_finite())
                    && f.theta.iter().flat_map(|t| t.iter()).all(|v| v.is_finite())
            })
    }
}

/// Descending parent-to-child path through the bone hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct KinematicChain {
    pub bones: Vec<usize>,
}

impl KinematicChain {
    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }
}

/// Template and rest joints after applying shape coefficients. Shared across
/// frames of one objective evaluation.
#[derive(Debug, Clone)]
pub struct ShapedBody {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
}

/// Global bone transforms for one posed frame (before global translation).
#[derive(Debug, Clone)]
pub struct FramePose {
    pub rot: Vec<Matrix3<f64>>,
    pub pos: Vec<Vector3<f64>>,
    local_rot: Vec<Matrix3<f64>>,
}

impl BodyModel {
    /// Validates the fields and builds derived lookup tables.
    pub fn new(
        bone_names: Vec<String>,
        parents: Vec<Option<usize>>,
        template_vertices: Vec<Vector3<f64>>,
        faces: Vec<[u32; 3]>,
        rest_joints: Vec<Vector3<f64>>,
        lbs_weights: Vec<f64>,
        shape_basis: Vec<Vec<Vector3<f64>>>,
        joint_shape_basis: Vec<Vec<Vector3<f64>>>,
        part_table: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let b = bone_names.len();
        let v = template_vertices.len();
        if b == 0 {
            return Err(Error::InvalidModel("no bones".into()));
        }
        if parents.len() != b || rest_joints.len() != b {
            return Err(Error::InvalidModel("bone array length mismatch".into()));
        }
        if lbs_weights.len() != v * b {
            return Err(Error::InvalidModel(format!(
                "lbs_weights has {} entries, expected {}",
                lbs_weights.len(),
                v * b
            )));
        }
        let mut roots = 0;
        for (i, p) in parents.iter().enumerate() {
            match p {
                None => roots += 1,
                Some(p) => {
                    if *p >= i {
                        return Err(Error::InvalidModel(format!(
                            "bone {i} has parent {p}; parents must precede children"
                        )));
                    }
                }
            }
        }
        if roots != 1 || parents[0].is_some() {
            return Err(Error::InvalidModel(
                "hierarchy must have exactly one root at index 0".into(),
            ));
        }
        for face in &faces {
            for &idx in face {
                if idx as usize >= v {
                    return Err(Error::InvalidModel(format!("face index {idx} out of range")));
                }
            }
        }
        for (row, chunk) in lbs_weights.chunks(b).enumerate() {
            let mut sum = 0.0;
            for &w in chunk {
                if !(w >= 0.0) {
                    return Err(Error::InvalidModel(format!(
                        "negative skinning weight on vertex {row}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidModel(format!(
                    "skinning weights of vertex {row} sum to {sum}"
                )));
            }
        }
        let s = shape_basis.len();
        if joint_shape_basis.len() != s {
            return Err(Error::InvalidModel("shape basis count mismatch".into()));
        }
        for basis in &shape_basis {
            if basis.len() != v {
                return Err(Error::InvalidModel("shape basis vertex count mismatch".into()));
            }
        }
        for basis in &joint_shape_basis {
            if basis.len() != b {
                return Err(Error::InvalidModel("joint shape basis bone count mismatch".into()));
            }
        }
        for (part, bones) in &part_table {
            for name in bones {
                if !bone_names.iter().any(|n| n == name) {
                    return Err(Error::InvalidModel(format!(
                        "part {part} references unknown bone {name}"
                    )));
                }
            }
        }

        let mut sparse_weights = Vec::with_capacity(v);
        let mut vertex_dominant_bone = Vec::with_capacity(v);
        for chunk in lbs_weights.chunks(b) {
            let mut row: Vec<(u32, f64)> = chunk
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(i, &w)| (i as u32, w))
                .collect();
            row.shrink_to_fit();
            // argmax with ties to the lowest bone index
            let mut best = 0usize;
            for (i, &w) in chunk.iter().enumerate() {
                if w > chunk[best] {
                    best = i;
                }
            }
            vertex_dominant_bone.push(best as u32);
            sparse_weights.push(row);
        }
        let mut children = vec![Vec::new(); b];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }

        Ok(Self {
            bone_names,
            parents,
            template_vertices,
            faces,
            rest_joints,
            lbs_weights,
            shape_basis,
            joint_shape_basis,
            part_table,
            sparse_weights,
            vertex_dominant_bone,
            children,
        })
    }

    pub fn bone_count(&self) -> usize {
        self.bone_names.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn shape_count(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn bone_index(&self, name: &str) -> Option<usize> {
        self.bone_names.iter().position(|n| n == name)
    }

    pub fn children(&self, bone: usize) -> &[usize] {
        &self.children[bone]
    }

    /// Bone that holds the maximal skinning weight for `vertex`.
    pub fn dominant_bone(&self, vertex: usize) -> usize {
        self.vertex_dominant_bone[vertex] as usize
    }

    pub fn sparse_weights(&self, vertex: usize) -> &[(u32, f64)] {
        &self.sparse_weights[vertex]
    }

    /// Applies shape coefficients to the template and rest joints.
    pub fn shape(&self, beta: &[f64]) -> Result<ShapedBody> {
        if beta.len() != self.shape_count() {
            return Err(Error::ShapeMismatch(format!(
                "beta has {} coefficients, model expects {}",
                beta.len(),
                self.shape_count()
            )));
        }
        let mut vertices = self.template_vertices.clone();
        let mut joints = self.rest_joints.clone();
        for (s, &coef) in beta.iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            for (vtx, dir) in vertices.iter_mut().zip(&self.shape_basis[s]) {
                *vtx += dir * coef;
            }
            for (jnt, dir) in joints.iter_mut().zip(&self.joint_shape_basis[s]) {
                *jnt += dir * coef;
            }
        }
        Ok(ShapedBody { vertices, joints })
    }

    /// Rigid forward kinematics for one frame. `root_rot` is the root bone's
    /// local (= global) rotation matrix; callers that parameterize the root
    /// differently (e.g. yaw offset composed onto a prior) pass the composed
    /// matrix and convert the returned matrix cotangent themselves.
    pub fn pose_frame(
        &self,
        shaped: &ShapedBody,
        root_rot: &Matrix3<f64>,
        theta: &[Vector3<f64>],
    ) -> Result<FramePose> {
        let b = self.bone_count();
        if theta.len() != b - 1 {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} joints, model expects {}",
                theta.len(),
                b - 1
            )));
        }
        let mut rot = Vec::with_capacity(b);
        let mut pos = Vec::with_capacity(b);
        let mut local_rot = Vec::with_capacity(b);
        for bone in 0..b {
            match self.parents[bone] {
                None => {
                    rot.push(*root_rot);
                    pos.push(shaped.joints[bone]);
                    local_rot.push(*root_rot);
                }
                Some(par) => {
                    let local = rodrigues(&theta[bone - 1]);
                    rot.push(rot[par] * local);
                    pos.push(pos[par] + rot[par] * (shaped.joints[bone] - shaped.joints[par]));
                    local_rot.push(local);
                }
            }
        }
        Ok(FramePose { rot, pos, local_rot })
    }

    /// Skins one vertex (global translation not applied).
    pub fn skin_vertex(&self, shaped: &ShapedBody, pose: &FramePose, vertex: usize) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for &(bone, w) in &self.sparse_weights[vertex] {
            let b = bone as usize;
            out += (pose.rot[b] * (shaped.vertices[vertex] - shaped.joints[b]) + pose.pos[b]) * w;
        }
        out
    }

    /// Skins every vertex into `out` (global translation not applied).
    pub fn skin_all(&self, shaped: &ShapedBody, pose: &FramePose, out: &mut Vec<Vector3<f64>>) {
        out.clear();
        out.extend((0..self.vertex_count()).map(|i| self.skin_vertex(shaped, pose, i)));
    }

    /// Posed joints and vertices for one frame of `params`.
    pub fn forward(&self, params: &BodyParams, frame: usize) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
        if frame >= params.frame_count() {
            return Err(Error::InvalidParams(format!(
                "frame {frame} out of range ({} frames)",
                params.frame_count()
            )));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("body parameters".into()));
        }
        let shaped = self.shape(&params.beta)?;
        let fp = &params.frames[frame];
        let pose = self.pose_frame(&shaped, &rodrigues(&fp.phi), &fp.theta)?;
        let joints = pose.pos.iter().map(|p| p + fp.gamma).collect();
        let mut vertices = Vec::new();
        self.skin_all(&shaped, &pose, &mut vertices);
        for v in &mut vertices {
            *v += fp.gamma;
        }
        Ok((joints, vertices))
    }

    /// Every vertex whose maximal skinning weight lies on one of `bones`.
    /// Weight ties resolve to the lowest bone index before membership is tested.
    pub fn part_vertices(&self, bones: &[usize]) -> Result<Vec<usize>> {
        if bones.is_empty() {
            return Err(Error::EmptyInput("part_vertices needs at least one bone".into()));
        }
        for &b in bones {
            if b >= self.bone_count() {
                return Err(Error::InvalidModel(format!("bone index {b} out of range")));
            }
        }
        Ok((0..self.vertex_count())
            .filter(|&i| bones.contains(&(self.vertex_dominant_bone[i] as usize)))
            .collect())
    }

    /// All simple descending parent-to-child paths of `k` bones, deduplicated
    /// greedily: a chain is dropped when its bone set shares at least
    /// `ceil(0.9 * k)` bones with an already-kept chain. Dedup is disabled for
    /// `k = 1`, which would otherwise collapse every bone into one candidate.
    /// Output is lexicographic by bone indices.
    pub fn enumerate_chains(&self, k: usize) -> Result<Vec<KinematicChain>> {
        if k == 0 || k > self.bone_count() {
            return Err(Error::InvalidParams(format!(
                "chain length {k} out of range 1..={}",
                self.bone_count()
            )));
        }
        let mut all = Vec::new();
        let mut path = Vec::with_capacity(k);
        for start in 0..self.bone_count() {
            path.clear();
            path.push(start);
            self.descend(&mut path, k, &mut all);
        }
        all.sort();
        if k == 1 {
            return Ok(all.into_iter().map(|bones| KinematicChain { bones }).collect());
        }
        let threshold = (0.9 * k as f64).ceil() as usize;
        let mut kept: Vec<Vec<usize>> = Vec::new();
        for chain in all {
            let redundant = kept.iter().any(|existing| {
                let shared = chain.iter().filter(|b| existing.contains(b)).count();
                shared >= threshold
            });
            if !redundant {
                kept.push(chain);
            }
        }
        Ok(kept.into_iter().map(|bones| KinematicChain { bones }).collect())
    }

    fn descend(&self, path: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if path.len() == k {
            out.push(path.clone());
            return;
        }
        let last = *path.last().unwrap();
        for &child in &self.children[last] {
            path.push(child);
            self.descend(path, k, out);
            path.pop();
        }
    }
}

/// Gradients of one frame's contribution to a scalar loss.
#[derive(Debug, Clone)]
pub struct FrameGrads {
    /// Cotangent of the root's local rotation matrix. Contract with the
    /// Jacobian of whatever parameterization produced that matrix.
    pub d_root_rot: Matrix3<f64>,
    /// Per non-root bone, gradient w.r.t. its axis-angle joint rotation.
    pub d_theta: Vec<Vector3<f64>>,
    pub d_gamma: Vector3<f64>,
    pub d_beta: Vec<f64>,
}

/// Reverse pass accumulator for one posed frame.
///
/// Feed vertex/joint cotangents with [`add_vertex_grad`](Self::add_vertex_grad)
/// and [`add_joint_grad`](Self::add_joint_grad), then call
/// [`finish`](Self::finish) to propagate through the kinematic chain, the
/// skinning weights, and the shape blending.
pub struct FrameBackward {
    d_rot: Vec<Matrix3<f64>>,
    d_pos: Vec<Vector3<f64>>,
    d_jrest: Vec<Vector3<f64>>,
    d_beta: Vec<f64>,
    d_gamma: Vector3<f64>,
}

impl FrameBackward {
    pub fn new(model: &BodyModel) -> Self {
        let b = model.bone_count();
        Self {
            d_rot: vec![Matrix3::zeros(); b],
            d_pos: vec![Vector3::zeros(); b],
            d_jrest: vec![Vector3::zeros(); b],
            d_beta: vec![0.0; model.shape_count()],
            d_gamma: Vector3::zeros(),
        }
    }

    /// Cotangent of a skinned vertex position (after global translation).
    pub fn add_vertex_grad(
        &mut self,
        model: &BodyModel,
        shaped: &ShapedBody,
        pose: &FramePose,
        vertex: usize,
        grad: &Vector3<f64>,
    ) {
        for &(bone, w) in &model.sparse_weights[vertex] {
            let b = bone as usize;
            let lever = shaped.vertices[vertex] - shaped.joints[b];
            self.d_rot[b] += (grad * w) * lever.transpose();
            self.d_pos[b] += grad * w;
            let u = pose.rot[b].transpose() * (grad * w);
            self.d_jrest[b] -= u;
            // u is also dL/d(shaped vertex); route it straight into beta
            for (s, basis) in model.shape_basis.iter().enumerate() {
                self.d_beta[s] += u.dot(&basis[vertex]);
            }
        }
        self.d_gamma += grad;
    }

    /// Cotangent of a posed joint position (after global translation).
    pub fn add_joint_grad(&mut self, bone: usize, grad: &Vector3<f64>) {
        self.d_pos[bone] += grad;
        self.d_gamma += grad;
    }

    /// Propagates the accumulated cotangents down to the parameters.
    pub fn finish(
        mut self,
        model: &BodyModel,
        shaped: &ShapedBody,
        pose: &FramePose,
        theta: &[Vector3<f64>],
    ) -> FrameGrads {
        let b = model.bone_count();
        let mut d_theta = vec![Vector3::zeros(); b - 1];
        let mut d_root_rot = Matrix3::zeros();
        for bone in (0..b).rev() {
            match model.parents[bone] {
                Some(par) => {
                    let local_grad = pose.rot[par].transpose() * self.d_rot[bone];
                    d_theta[bone - 1] = rotation_grad_to_axis_angle(&theta[bone - 1], &local_grad);
                    let offset = shaped.joints[bone] - shaped.joints[par];
                    let d_rot_bone = self.d_rot[bone];
                    let d_pos_bone = self.d_pos[bone];
                    self.d_rot[par] +=
                        d_rot_bone * pose.local_rot[bone].transpose() + d_pos_bone * offset.transpose();
                    self.d_pos[par] += d_pos_bone;
                    let d_offset = pose.rot[par].transpose() * d_pos_bone;
                    self.d_jrest[bone] += d_offset;
                    self.d_jrest[par] -= d_offset;
                }
                None => {
                    d_root_rot = self.d_rot[bone];
                    self.d_jrest[bone] += self.d_pos[bone];
                }
            }
        }
        for (s, basis) in model.joint_shape_basis.iter().enumerate() {
            for bone in 0..b {
                self.d_beta[s] += self.d_jrest[bone].dot(&basis[bone]);
            }
        }
        FrameGrads {
            d_root_rot,
            d_theta,
            d_gamma: self.d_gamma,
            d_beta: self.d_beta,
        }
    }
}

#[cfg(test)]
mod tests;
