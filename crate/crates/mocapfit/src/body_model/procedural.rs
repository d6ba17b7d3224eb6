//! Procedurally generated 24-bone humanoid used as the bundled body model.
//!
//! The skeleton follows the standard SMPL bone-name vocabulary so that named
//! part definitions resolve. The skin is a low-poly capsule mesh (one capsule
//! per bone) with smooth weight falloff across neighboring bones, and ten
//! shape coefficients controlling global scale, limb lengths, and girth.
//! Everything is deterministic: building the model twice yields identical
//! arrays.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::BodyModel;

const RING_SEGMENTS: usize = 8;
const RINGS_PER_BONE: usize = 4;
const WEIGHT_SIGMA: f64 = 0.06;

/// name, parent, rest joint position (x = body left, y = up, z = forward)
const BONES: [(&str, Option<usize>, [f64; 3]); 24] = [
    ("pelvis", None, [0.0, 0.0, 0.0]),
    ("left_hip", Some(0), [0.09, -0.07, 0.0]),
    ("right_hip", Some(0), [-0.09, -0.07, 0.0]),
    ("spine1", Some(0), [0.0, 0.11, 0.0]),
    ("left_knee", Some(1), [0.10, -0.48, 0.0]),
    ("right_knee", Some(2), [-0.10, -0.48, 0.0]),
    ("spine2", Some(3), [0.0, 0.22, 0.0]),
    ("left_ankle", Some(4), [0.105, -0.87, -0.02]),
    ("right_ankle", Some(5), [-0.105, -0.87, -0.02]),
    ("spine3", Some(6), [0.0, 0.31, 0.0]),
    ("left_foot", Some(7), [0.11, -0.94, 0.10]),
    ("right_foot", Some(8), [-0.11, -0.94, 0.10]),
    ("neck", Some(9), [0.0, 0.43, 0.0]),
    ("left_collar", Some(9), [0.05, 0.38, 0.0]),
    ("right_collar", Some(9), [-0.05, 0.38, 0.0]),
    ("head", Some(12), [0.0, 0.52, 0.02]),
    ("left_shoulder", Some(13), [0.17, 0.41, 0.0]),
    ("right_shoulder", Some(14), [-0.17, 0.41, 0.0]),
    ("left_elbow", Some(16), [0.42, 0.41, 0.0]),
    ("right_elbow", Some(17), [-0.42, 0.41, 0.0]),
    ("left_wrist", Some(18), [0.66, 0.41, 0.0]),
    ("right_wrist", Some(19), [-0.66, 0.41, 0.0]),
    ("left_hand", Some(20), [0.74, 0.41, 0.0]),
    ("right_hand", Some(21), [-0.74, 0.41, 0.0]),
];

/// Capsule radius per bone.
const RADII: [f64; 24] = [
    0.105, // pelvis
    0.070, // left_hip (thigh)
    0.070, // right_hip
    0.110, // spine1
    0.050, // left_knee (calf)
    0.050, // right_knee
    0.112, // spine2
    0.036, // left_ankle
    0.036, // right_ankle
    0.100, // spine3 (chest)
    0.035, // left_foot
    0.035, // right_foot
    0.045, // neck
    0.050, // left_collar
    0.050, // right_collar
    0.085, // head
    0.042, // left_shoulder (upper arm)
    0.042, // right_shoulder
    0.035, // left_elbow (forearm)
    0.035, // right_elbow
    0.028, // left_wrist (hand base)
    0.028, // right_wrist
    0.025, // left_hand
    0.025, // right_hand
];

/// Primary child bone defining each capsule's axis; leaves get a fixed extension.
fn segment_end(bone: usize, joints: &[Vector3<f64>]) -> Vector3<f64> {
    let primary_child: [Option<usize>; 24] = [
        Some(3),  // pelvis -> spine1
        Some(4),  // left_hip -> left_knee
        Some(5),  // right_hip -> right_knee
        Some(6),  // spine1 -> spine2
        Some(7),  // left_knee -> left_ankle
        Some(8),  // right_knee -> right_ankle
        Some(9),  // spine2 -> spine3
        Some(10), // left_ankle -> left_foot
        Some(11), // right_ankle -> right_foot
        Some(12), // spine3 -> neck
        None,     // left_foot
        None,     // right_foot
        Some(15), // neck -> head
        Some(16), // left_collar -> left_shoulder
        Some(17), // right_collar -> right_shoulder
        None,     // head
        Some(18), // left_shoulder -> left_elbow
        Some(19), // right_shoulder -> right_elbow
        Some(20), // left_elbow -> left_wrist
        Some(21), // right_elbow -> right_wrist
        Some(22), // left_wrist -> left_hand
        Some(23), // right_wrist -> right_hand
        None,     // left_hand
        None,     // right_hand
    ];
    if let Some(child) = primary_child[bone] {
        return joints[child];
    }
    let ext: Vector3<f64> = match bone {
        10 | 11 => Vector3::new(0.0, -0.01, 0.07), // toes forward
        15 => Vector3::new(0.0, 0.15, 0.0),        // head top
        22 => Vector3::new(0.07, 0.0, 0.0),        // left fingers
        23 => Vector3::new(-0.07, 0.0, 0.0),       // right fingers
        _ => unreachable!(),
    };
    joints[bone] + ext
}

fn closest_point_on_segment(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&d) / len2).clamp(0.0, 1.0);
    a + d * t
}

/// Orthonormal frame (u, w) perpendicular to `axis`, chosen deterministically.
fn perpendicular_frame(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = axis.cross(&helper).normalize();
    let w = axis.cross(&u);
    (u, w)
}

struct MeshBuild {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    /// capsule each vertex was emitted for
    vertex_bone: Vec<usize>,
}

fn build_capsule_mesh(joints: &[Vector3<f64>]) -> MeshBuild {
    let mut vertices = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut vertex_bone = Vec::new();
    for bone in 0..BONES.len() {
        let start = joints[bone];
        let end = segment_end(bone, joints);
        let radius = RADII[bone];
        let axis = (end - start).normalize();
        let (u, w) = perpendicular_frame(&axis);
        let base = vertices.len() as u32;
        // interior rings, inset from the ends so the caps close nicely
        let first_center = start + (end - start) * 0.08;
        let last_center = start + (end - start) * 0.92;
        for ring in 0..RINGS_PER_BONE {
            let t = 0.08 + 0.84 * ring as f64 / (RINGS_PER_BONE - 1) as f64;
            let center = start + (end - start) * t;
            for seg in 0..RING_SEGMENTS {
                let angle = std::f64::consts::TAU * seg as f64 / RING_SEGMENTS as f64;
                vertices.push(center + (u * angle.cos() + w * angle.sin()) * radius);
                vertex_bone.push(bone);
            }
        }
        // shallow caps keep thick capsules from bulging through their neighbors
        let tip_start = vertices.len() as u32;
        vertices.push(first_center - axis * (0.4 * radius));
        vertex_bone.push(bone);
        let tip_end = vertices.len() as u32;
        vertices.push(last_center + axis * (0.4 * radius));
        vertex_bone.push(bone);

        let n = RING_SEGMENTS as u32;
        for ring in 0..(RINGS_PER_BONE - 1) as u32 {
            for seg in 0..n {
                let a = base + ring * n + seg;
                let b = base + ring * n + (seg + 1) % n;
                let c = base + (ring + 1) * n + (seg + 1) % n;
                let d = base + (ring + 1) * n + seg;
                faces.push([a, c, d]);
                faces.push([a, b, c]);
            }
        }
        let last = base + (RINGS_PER_BONE as u32 - 1) * n;
        for seg in 0..n {
            // start cap (reversed so the normal points down the axis)
            faces.push([base + (seg + 1) % n, base + seg, tip_start]);
            // end cap
            faces.push([last + seg, last + (seg + 1) % n, tip_end]);
        }
    }
    MeshBuild {
        vertices,
        faces,
        vertex_bone,
    }
}

/// Neighboring bones considered when blending skin weights: the bone itself,
/// its parent, and its children.
fn weight_candidates(bone: usize, parents: &[Option<usize>]) -> Vec<usize> {
    let mut c = vec![bone];
    if let Some(p) = parents[bone] {
        c.push(p);
    }
    for (i, p) in parents.iter().enumerate() {
        if *p == Some(bone) {
            c.push(i);
        }
    }
    c.sort_unstable();
    c
}

fn build_weights(
    mesh: &MeshBuild,
    joints: &[Vector3<f64>],
    parents: &[Option<usize>],
) -> Vec<f64> {
    let b = BONES.len();
    let segments: Vec<(Vector3<f64>, Vector3<f64>)> = (0..b)
        .map(|bone| (joints[bone], segment_end(bone, joints)))
        .collect();
    let mut weights = vec![0.0; mesh.vertices.len() * b];
    for (i, vertex) in mesh.vertices.iter().enumerate() {
        let own = mesh.vertex_bone[i];
        let row = &mut weights[i * b..(i + 1) * b];
        let mut sum = 0.0;
        for cand in weight_candidates(own, parents) {
            let (s, e) = segments[cand];
            let d = (vertex - closest_point_on_segment(vertex, &s, &e)).norm();
            let w = (-(d / WEIGHT_SIGMA).powi(2)).exp();
            row[cand] = w;
            sum += w;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }
    weights
}

/// Radial direction from a vertex's own capsule axis, used by girth modes.
fn radial_direction(vertex: &Vector3<f64>, bone: usize, joints: &[Vector3<f64>]) -> Vector3<f64> {
    let s = joints[bone];
    let e = segment_end(bone, joints);
    let r = vertex - closest_point_on_segment(vertex, &s, &e);
    let n = r.norm();
    if n < 1e-9 {
        Vector3::x()
    } else {
        r / n
    }
}

/// Builds the bundled humanoid model. Deterministic.
pub fn humanoid() -> BodyModel {
    let bone_names: Vec<String> = BONES.iter().map(|(n, _, _)| n.to_string()).collect();
    let parents: Vec<Option<usize>> = BONES.iter().map(|(_, p, _)| *p).collect();
    let joints: Vec<Vector3<f64>> = BONES
        .iter()
        .map(|(_, _, p)| Vector3::new(p[0], p[1], p[2]))
        .collect();

    let mesh = build_capsule_mesh(&joints);
    let weights = build_weights(&mesh, &joints, &parents);

    let b = BONES.len();
    let v = mesh.vertices.len();
    let s = 10;

    let torso = [0usize, 3, 6, 9];
    let limbs = [1usize, 2, 4, 5, 7, 8, 16, 17, 18, 19, 20, 21];
    let left_arm_chain = [18usize, 20, 22];
    let right_arm_chain = [19usize, 21, 23];

    // Joint displacement fields D[s][b]; vertex displacements for the
    // length-type modes follow the joints through the skinning weights.
    let mut joint_disp = vec![vec![Vector3::<f64>::zeros(); b]; s];
    for bone in 0..b {
        // 0: overall scale (6% per unit coefficient)
        joint_disp[0][bone] = joints[bone] * 0.06;
    }
    // 3: leg length
    for (bone, amount) in [(4, 0.025), (5, 0.025), (7, 0.05), (8, 0.05), (10, 0.052), (11, 0.052)] {
        joint_disp[3][bone] = Vector3::new(0.0, -amount, 0.0);
    }
    // 4: arm length
    for &bone in &left_arm_chain {
        let amount = match bone {
            18 => 0.025,
            20 => 0.05,
            _ => 0.055,
        };
        joint_disp[4][bone] = Vector3::new(amount, 0.0, 0.0);
    }
    for &bone in &right_arm_chain {
        let amount = match bone {
            19 => 0.025,
            21 => 0.05,
            _ => 0.055,
        };
        joint_disp[4][bone] = Vector3::new(-amount, 0.0, 0.0);
    }
    // 5: torso length (everything above the pelvis rises progressively)
    for (bone, amount) in [
        (3usize, 0.008),
        (6, 0.016),
        (9, 0.024),
        (12, 0.032),
        (13, 0.032),
        (14, 0.032),
        (15, 0.036),
        (16, 0.032),
        (17, 0.032),
        (18, 0.032),
        (19, 0.032),
        (20, 0.032),
        (21, 0.032),
        (22, 0.032),
        (23, 0.032),
    ] {
        joint_disp[5][bone] = Vector3::new(0.0, amount, 0.0);
    }
    // 6: shoulder width
    for (bone, amount) in [
        (13usize, 0.008),
        (16, 0.024),
        (18, 0.024),
        (20, 0.024),
        (22, 0.024),
    ] {
        joint_disp[6][bone] = Vector3::new(amount, 0.0, 0.0);
    }
    for (bone, amount) in [
        (14usize, 0.008),
        (17, 0.024),
        (19, 0.024),
        (21, 0.024),
        (23, 0.024),
    ] {
        joint_disp[6][bone] = Vector3::new(-amount, 0.0, 0.0);
    }
    // 7: head size (slight rise of the head joint; girth handled per vertex)
    joint_disp[7][15] = Vector3::new(0.0, 0.004, 0.0);
    // 8: hip width
    for (bone, sign) in [(1usize, 1.0), (2, -1.0), (4, 1.0), (5, -1.0), (7, 1.0), (8, -1.0), (10, 1.0), (11, -1.0)]
    {
        joint_disp[8][bone] = Vector3::new(0.015 * sign, 0.0, 0.0);
    }

    let mut shape_basis = vec![vec![Vector3::<f64>::zeros(); v]; s];
    let mut joint_shape_basis = vec![vec![Vector3::<f64>::zeros(); b]; s];
    for mode in 0..s {
        joint_shape_basis[mode] = joint_disp[mode].clone();
    }
    for i in 0..v {
        let own = mesh.vertex_bone[i];
        let dominant = {
            let row = &weights[i * b..(i + 1) * b];
            let mut best = 0usize;
            for (j, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = j;
                }
            }
            best
        };
        let radial = radial_direction(&mesh.vertices[i], own, &joints);
        // LBS-propagated part of every mode
        for mode in 0..s {
            let mut disp = Vector3::zeros();
            let row = &weights[i * b..(i + 1) * b];
            for (bone, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    disp += joint_disp[mode][bone] * w;
                }
            }
            shape_basis[mode][i] = disp;
        }
        // 0: overall scale moves vertices with the template, not the joints
        shape_basis[0][i] = mesh.vertices[i] * 0.06;
        // 1: torso girth
        if torso.contains(&dominant) {
            shape_basis[1][i] += radial * 0.015;
        }
        // 2: limb girth
        if limbs.contains(&dominant) {
            shape_basis[2][i] += radial * 0.012;
        }
        // 7: head girth
        if dominant == 15 || dominant == 12 {
            shape_basis[7][i] += radial * 0.015;
        }
        // 9: belly (front torso bulge)
        if torso.contains(&dominant) {
            let y = mesh.vertices[i].y;
            let falloff = (-((y - 0.08) / 0.15).powi(2)).exp();
            let front = radial.z.max(0.0);
            shape_basis[9][i] += Vector3::new(0.0, 0.0, 0.02 * falloff * front);
        }
    }

    let mut part_table = BTreeMap::new();
    part_table.insert(
        "left_arm".to_string(),
        vec!["left_shoulder".into(), "left_elbow".into(), "left_wrist".into()],
    );
    part_table.insert(
        "left_leg".to_string(),
        vec![
            "left_hip".into(),
            "left_knee".into(),
            "left_ankle".into(),
            "left_foot".into(),
        ],
    );
    part_table.insert(
        "left_shoulder".to_string(),
        vec![
            "spine3".into(),
            "left_collar".into(),
            "left_shoulder".into(),
            "left_elbow".into(),
        ],
    );
    part_table.insert(
        "right_arm".to_string(),
        vec![
            "right_shoulder".into(),
            "right_elbow".into(),
            "right_wrist".into(),
        ],
    );
    part_table.insert(
        "right_leg".to_string(),
        vec![
            "right_hip".into(),
            "right_knee".into(),
            "right_ankle".into(),
            "right_foot".into(),
        ],
    );
    part_table.insert(
        "right_shoulder".to_string(),
        vec![
            "spine3".into(),
            "right_collar".into(),
            "right_shoulder".into(),
            "right_elbow".into(),
        ],
    );

    BodyModel::new(
        bone_names,
        parents,
        mesh.vertices,
        mesh.faces,
        joints,
        weights,
        shape_basis,
        joint_shape_basis,
        part_table,
    )
    .expect("procedural humanoid must validate")
}
