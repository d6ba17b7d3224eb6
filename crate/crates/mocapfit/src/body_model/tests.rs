use std::collections::BTreeMap;

use approx::assert_relative_eq;
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::procedural::humanoid;
use super::test_models::toy_chain;
use super::*;
use crate::math::rodrigues;

fn random_params(model: &BodyModel, frames: usize, rng: &mut ChaCha8Rng) -> BodyParams {
    let mut params = BodyParams::zeros(model.shape_count(), model.bone_count(), frames);
    for b in &mut params.beta {
        *b = rng.gen_range(-0.5..0.5);
    }
    for f in &mut params.frames {
        f.phi = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        f.gamma = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        for t in &mut f.theta {
            *t = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            );
        }
    }
    params
}

#[test]
fn forward_identity_reproduces_template() {
    for model in [toy_chain(), humanoid()] {
        let params = BodyParams::zeros(model.shape_count(), model.bone_count(), 1);
        let (joints, vertices) = model.forward(&params, 0).unwrap();
        for (j, r) in joints.iter().zip(&model.rest_joints) {
            assert_relative_eq!(j, r, epsilon = 1e-12);
        }
        for (v, t) in vertices.iter().zip(&model.template_vertices) {
            assert_relative_eq!(v, t, epsilon = 1e-12);
        }
    }
}

#[test]
fn forward_translation_equivariance() {
    let model = toy_chain();
    let mut params = BodyParams::zeros(model.shape_count(), model.bone_count(), 1);
    params.frames[0].gamma = Vector3::new(1.0, 2.0, 3.0);
    let (joints, vertices) = model.forward(&params, 0).unwrap();
    for (j, r) in joints.iter().zip(&model.rest_joints) {
        assert_relative_eq!(j, &(r + Vector3::new(1.0, 2.0, 3.0)), epsilon = 1e-12);
    }
    for (v, t) in vertices.iter().zip(&model.template_vertices) {
        assert_relative_eq!(v, &(t + Vector3::new(1.0, 2.0, 3.0)), epsilon = 1e-12);
    }
}

#[test]
fn forward_middle_joint_quarter_turn() {
    // rotate the mid joint 90 degrees about z; the tip joint lands where the
    // hand-composed rigid transform puts it: rest offset (0,1,0) rotated to (-1,0,0)
    let model = toy_chain();
    let mut params = BodyParams::zeros(model.shape_count(), model.bone_count(), 1);
    params.frames[0].theta[0] = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
    let (joints, _) = model.forward(&params, 0).unwrap();
    assert_relative_eq!(joints[1], Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    assert_relative_eq!(joints[2], Vector3::new(-1.0, 1.0, 0.0), epsilon = 1e-12);
}

#[test]
fn forward_rejects_non_finite_params() {
    let model = toy_chain();
    let mut params = BodyParams::zeros(model.shape_count(), model.bone_count(), 1);
    params.frames[0].phi.x = f64::NAN;
    assert!(model.forward(&params, 0).is_err());
}

#[test]
fn forward_rejects_out_of_range_frame() {
    let model = toy_chain();
    let params = BodyParams::zeros(model.shape_count(), model.bone_count(), 2);
    assert!(model.forward(&params, 2).is_err());
}

#[test]
fn rigid_equivariance() {
    // composing a rigid transform into (phi, gamma) moves the outputs rigidly
    let model = humanoid();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = random_params(&model, 1, &mut rng);
    let (joints, vertices) = model.forward(&params, 0).unwrap();

    let g_rot = rodrigues(&Vector3::new(0.4, -0.7, 0.2));
    let g_t = Vector3::new(0.3, 1.1, -0.5);
    let shaped = model.shape(&params.beta).unwrap();
    let root = shaped.joints[0];

    let mut moved = params.clone();
    let phi_new = g_rot * rodrigues(&params.frames[0].phi);
    moved.frames[0].phi = nalgebra::Rotation3::from_matrix_unchecked(phi_new).scaled_axis();
    moved.frames[0].gamma = g_rot * root - root + g_rot * params.frames[0].gamma + g_t;

    let (joints2, vertices2) = model.forward(&moved, 0).unwrap();
    for (a, b) in joints.iter().zip(&joints2) {
        assert_relative_eq!(&(g_rot * a + g_t), b, epsilon = 1e-9);
    }
    for (a, b) in vertices.iter().zip(&vertices2) {
        assert_relative_eq!(&(g_rot * a + g_t), b, epsilon = 1e-9);
    }
}

#[test]
fn weight_one_vertex_follows_its_bone() {
    let model = toy_chain();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = random_params(&model, 1, &mut rng);
    let (_, vertices) = model.forward(&params, 0).unwrap();
    let shaped = model.shape(&params.beta).unwrap();
    let fp = &params.frames[0];
    let pose = model
        .pose_frame(&shaped, &rodrigues(&fp.phi), &fp.theta)
        .unwrap();
    // vertex 2 is rigidly bound to bone 2
    let expect = pose.rot[2] * (shaped.vertices[2] - shaped.joints[2]) + pose.pos[2] + fp.gamma;
    assert_relative_eq!(vertices[2], expect, epsilon = 1e-12);
}

#[test]
fn part_vertices_toy_and_errors() {
    let model = toy_chain();
    assert_eq!(model.part_vertices(&[0]).unwrap(), vec![0, 3]); // blended vertex ties to bone 0
    assert_eq!(model.part_vertices(&[1]).unwrap(), vec![1]);
    assert!(model.part_vertices(&[]).is_err());
    assert!(model.part_vertices(&[9]).is_err());
}

#[test]
fn part_vertices_partition_property() {
    let model = humanoid();
    let mut seen = vec![false; model.vertex_count()];
    let mut total = 0usize;
    for bone in 0..model.bone_count() {
        for v in model.part_vertices(&[bone]).unwrap() {
            assert!(!seen[v], "vertex {v} in two parts");
            seen[v] = true;
            total += 1;
        }
    }
    assert_eq!(total, model.vertex_count());
}

#[test]
fn part_vertices_matches_argmax_scan() {
    let model = humanoid();
    let b = model.bone_count();
    for bone in [0usize, 7, 15, 23] {
        let got = model.part_vertices(&[bone]).unwrap();
        let mut expect = Vec::new();
        for vtx in 0..model.vertex_count() {
            let row = &model.lbs_weights[vtx * b..(vtx + 1) * b];
            let mut best = 0usize;
            for (i, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = i;
                }
            }
            if best == bone {
                expect.push(vtx);
            }
        }
        assert_eq!(got, expect);
    }
}

#[test]
fn enumerate_chains_linear_hierarchy() {
    let model = toy_chain();
    let chains = model.enumerate_chains(2).unwrap();
    assert_eq!(
        chains,
        vec![
            KinematicChain { bones: vec![0, 1] },
            KinematicChain { bones: vec![1, 2] },
        ]
    );
    // k = 1 keeps every bone (dedup is disabled there)
    let singles = model.enumerate_chains(1).unwrap();
    assert_eq!(singles.len(), 3);
    // longer than the deepest path yields nothing
    assert!(model.enumerate_chains(3).unwrap().len() == 1);
    let too_long = humanoid().enumerate_chains(24).unwrap();
    assert!(too_long.is_empty());
}

#[test]
fn enumerate_chains_matches_dfs_count() {
    let model = humanoid();
    // brute-force DFS path count for k = 3
    fn count_paths(model: &BodyModel, bone: usize, depth: usize, k: usize) -> usize {
        if depth == k {
            return 1;
        }
        model
            .children(bone)
            .iter()
            .map(|&c| count_paths(model, c, depth + 1, k))
            .sum()
    }
    let expect: usize = (0..model.bone_count())
        .map(|b| count_paths(&model, b, 1, 3))
        .sum();
    // dedup threshold ceil(0.9*3) = 3 only removes identical bone sets, and
    // distinct descending paths always differ as sets
    let chains = model.enumerate_chains(3).unwrap();
    assert_eq!(chains.len(), expect);
    for c in &chains {
        for i in 0..c.bones.len() - 1 {
            assert_eq!(model.parents[c.bones[i + 1]], Some(c.bones[i]));
        }
    }
}

#[test]
fn enumerate_chains_no_duplicate_bone_sets() {
    let model = humanoid();
    for k in [1usize, 2, 4, 6, 9] {
        let chains = model.enumerate_chains(k).unwrap();
        let mut sets: Vec<Vec<usize>> = chains
            .iter()
            .map(|c| {
                let mut s = c.bones.clone();
                s.sort_unstable();
                s
            })
            .collect();
        let before = sets.len();
        sets.sort();
        sets.dedup();
        assert_eq!(before, sets.len(), "duplicate bone sets at k={k}");
    }
}

/// Scalar loss used by the gradient checks: squared distance of every vertex
/// and joint to fixed random anchors.
fn anchored_loss(
    model: &BodyModel,
    params: &BodyParams,
    frame: usize,
    vertex_anchors: &[Vector3<f64>],
    joint_anchors: &[Vector3<f64>],
) -> f64 {
    let (joints, vertices) = model.forward(params, frame).unwrap();
    let mut loss = 0.0;
    for (v, a) in vertices.iter().zip(vertex_anchors) {
        loss += (v - a).norm_squared();
    }
    for (j, a) in joints.iter().zip(joint_anchors) {
        loss += (j - a).norm_squared();
    }
    loss
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for model in [toy_chain(), humanoid()] {
        let params = random_params(&model, 1, &mut rng);
        let vertex_anchors: Vec<Vector3<f64>> = (0..model.vertex_count())
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let joint_anchors: Vec<Vector3<f64>> = (0..model.bone_count())
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();

        // analytic gradient
        let shaped = model.shape(&params.beta).unwrap();
        let fp = &params.frames[0];
        let pose = model
            .pose_frame(&shaped, &rodrigues(&fp.phi), &fp.theta)
            .unwrap();
        let mut bw = FrameBackward::new(&model);
        for i in 0..model.vertex_count() {
            let v = model.skin_vertex(&shaped, &pose, i) + fp.gamma;
            bw.add_vertex_grad(&model, &shaped, &pose, i, &(2.0 * (v - vertex_anchors[i])));
        }
        for b in 0..model.bone_count() {
            let j = pose.pos[b] + fp.gamma;
            bw.add_joint_grad(b, &(2.0 * (j - joint_anchors[b])));
        }
        let grads = bw.finish(&model, &shaped, &pose, &fp.theta);
        let d_phi = crate::math::rotation_grad_to_axis_angle(&fp.phi, &grads.d_root_rot);

        // finite differences over the full flattened parameter vector
        let h = 1e-5;
        let mut flat: Vec<f64> = Vec::new();
        flat.extend_from_slice(&params.beta);
        flat.extend(fp.phi.iter());
        flat.extend(fp.gamma.iter());
        for t in &fp.theta {
            flat.extend(t.iter());
        }
        let rebuild = |flat: &[f64]| -> BodyParams {
            let mut p = params.clone();
            let s = model.shape_count();
            p.beta.copy_from_slice(&flat[..s]);
            p.frames[0].phi = Vector3::new(flat[s], flat[s + 1], flat[s + 2]);
            p.frames[0].gamma = Vector3::new(flat[s + 3], flat[s + 4], flat[s + 5]);
            for (k, t) in p.frames[0].theta.iter_mut().enumerate() {
                let o = s + 6 + 3 * k;
                *t = Vector3::new(flat[o], flat[o + 1], flat[o + 2]);
            }
            p
        };
        let mut analytic: Vec<f64> = Vec::new();
        analytic.extend_from_slice(&grads.d_beta);
        analytic.extend(d_phi.iter());
        analytic.extend(grads.d_gamma.iter());
        for t in &grads.d_theta {
            analytic.extend(t.iter());
        }

        let mut checked = 0usize;
        let mut ok = 0usize;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (anchored_loss(&model, &rebuild(&plus), 0, &vertex_anchors, &joint_anchors)
                - anchored_loss(&model, &rebuild(&minus), 0, &vertex_anchors, &joint_anchors))
                / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            checked += 1;
            if ((analytic[i] - fd) / denom).abs() <= 1e-4 {
                ok += 1;
            }
        }
        assert!(
            ok as f64 >= 0.99 * checked as f64,
            "gradient check: {ok}/{checked} coordinates within tolerance"
        );
    }
}

#[test]
fn validation_rejects_bad_hierarchies() {
    let mut parents = vec![None, Some(0), Some(1)];
    parents[2] = Some(2); // self-parent
    let result = BodyModel::new(
        vec!["a".into(), "b".into(), "c".into()],
        parents,
        vec![Vector3::zeros()],
        vec![],
        vec![Vector3::zeros(); 3],
        vec![1.0, 0.0, 0.0],
        vec![],
        vec![],
        BTreeMap::new(),
    );
    assert!(result.is_err());

    // weights that do not sum to one
    let result = BodyModel::new(
        vec!["a".into(), "b".into()],
        vec![None, Some(0)],
        vec![Vector3::zeros()],
        vec![],
        vec![Vector3::zeros(); 2],
        vec![0.7, 0.7],
        vec![],
        vec![],
        BTreeMap::new(),
    );
    assert!(result.is_err());
}

#[test]
fn pose_frame_with_composed_root_rotation() {
    // the root rotation matrix is caller-supplied; composing a yaw on top of a
    // prior matches composing the axis-angle parameters
    let model = toy_chain();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let params = random_params(&model, 1, &mut rng);
    let shaped = model.shape(&params.beta).unwrap();
    let yaw = crate::math::yaw_rotation(1.1, crate::math::UpAxis::Y);
    let fp = &params.frames[0];
    let composed = yaw * rodrigues(&fp.phi);
    let pose_a = model.pose_frame(&shaped, &composed, &fp.theta).unwrap();

    let aa = crate::math::compose_axis_angle(&(Vector3::y() * 1.1), &fp.phi);
    let pose_b = model.pose_frame(&shaped, &rodrigues(&aa), &fp.theta).unwrap();
    for (a, b) in pose_a.pos.iter().zip(&pose_b.pos) {
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }
}

#[test]
fn humanoid_part_table_resolves_to_chains() {
    let model = humanoid();
    for (part, bones) in &model.part_table {
        let indices: Vec<usize> = bones
            .iter()
            .map(|n| model.bone_index(n).unwrap())
            .collect();
        for pair in indices.windows(2) {
            assert_eq!(
                model.parents[pair[1]],
                Some(pair[0]),
                "part {part} is not a descending chain"
            );
        }
    }
}
