use approx::assert_relative_eq;
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::body_model::procedural::humanoid;
use crate::synth::{animate_markers, sample_layout, scenario_motion, Scenario};

fn walk_setup(frames: usize, n_markers: usize, seed: u64) -> (crate::body_model::BodyModel, BodyParams, MarkerSequence) {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, frames, 30.0, seed);
    let layout = sample_layout(&model, n_markers, seed).unwrap();
    let markers = animate_markers(&model, &gt, &layout, 30.0).unwrap();
    (model, gt, markers)
}

fn markers_on_vertices(
    model: &crate::body_model::BodyModel,
    params: &BodyParams,
    vertex_ids: &[usize],
) -> MarkerSequence {
    let t = params.frame_count();
    let mut positions = Vec::new();
    for frame in 0..t {
        let (_, vertices) = model.forward(params, frame).unwrap();
        for &v in vertex_ids {
            positions.push(vertices[v]);
        }
    }
    let ids = (0..vertex_ids.len()).map(|i| format!("m{i}")).collect();
    MarkerSequence::new(ids, 30.0, positions, vec![true; t * vertex_ids.len()]).unwrap()
}

#[test]
fn pose_reg_examples() {
    let model = humanoid();
    let a = scenario_motion(Scenario::Walk, &model, 4, 30.0, 1);
    let valid = vec![true; 4];
    assert_relative_eq!(pose_reg(&a.frames, &a.frames, &valid).unwrap(), 0.0);

    // difference of one radian in every coordinate gives exactly one
    let mut b = a.clone();
    for f in &mut b.frames {
        for t in &mut f.theta {
            *t += Vector3::new(1.0, 1.0, 1.0);
        }
    }
    assert_relative_eq!(pose_reg(&b.frames, &a.frames, &valid).unwrap(), 1.0, epsilon = 1e-12);

    // random pair matches the flat mean-square oracle
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut c = a.clone();
    for f in &mut c.frames {
        for t in &mut f.theta {
            *t += Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fa, fc) in a.frames.iter().zip(&c.frames) {
        for (ta, tc) in fa.theta.iter().zip(&fc.theta) {
            sum += (ta - tc).norm_squared();
            n += 3;
        }
    }
    assert_relative_eq!(
        pose_reg(&c.frames, &a.frames, &valid).unwrap(),
        sum / n as f64,
        epsilon = 1e-12
    );

    // masked frames leave both sum and count
    let masked = vec![true, false, true, false];
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (fa, fc)) in a.frames.iter().zip(&c.frames).enumerate() {
        if masked[i] {
            for (ta, tc) in fa.theta.iter().zip(&fc.theta) {
                sum += (ta - tc).norm_squared();
                n += 3;
            }
        }
    }
    assert_relative_eq!(
        pose_reg(&c.frames, &a.frames, &masked).unwrap(),
        sum / n as f64,
        epsilon = 1e-12
    );

    assert!(pose_reg(&a.frames[..2], &a.frames, &valid).is_err());
}

#[test]
fn marker_offset_loss_examples() {
    let model = humanoid();
    let params = BodyParams::zeros(model.shape_count(), model.bone_count(), 1);
    let (_, vertices) = model.forward(&params, 0).unwrap();
    let delta = 0.0095;

    // markers exactly delta away from their vertices
    let chosen = [3usize, 100, 400, 700];
    let mut positions = Vec::new();
    for &v in &chosen {
        positions.push(vertices[v] + Vector3::new(0.0, delta, 0.0));
    }
    let ids = (0..4).map(|i| format!("m{i}")).collect();
    let markers = MarkerSequence::new(ids, 30.0, positions, vec![true; 4]).unwrap();
    let corr = Correspondence {
        vertex: chosen.iter().map(|&v| Some(v as u32)).collect(),
    };
    assert_relative_eq!(
        marker_offset_loss(&markers, &corr, &params, &model, delta).unwrap(),
        0.0,
        epsilon = 1e-18
    );

    // one marker at 2*delta, one frame: (2d - d)^2 = d^2
    let markers2 = MarkerSequence::new(
        vec!["a".into()],
        30.0,
        vec![vertices[10] + Vector3::new(2.0 * delta, 0.0, 0.0)],
        vec![true],
    )
    .unwrap();
    let corr2 = Correspondence { vertex: vec![Some(10)] };
    assert_relative_eq!(
        marker_offset_loss(&markers2, &corr2, &params, &model, delta).unwrap(),
        delta * delta,
        epsilon = 1e-15
    );

    // random configuration matches the nested-loop oracle
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = scenario_motion(Scenario::Walk, &model, 3, 30.0, 5);
    let picks: Vec<usize> = (0..6).map(|_| rng.gen_range(0..model.vertex_count())).collect();
    let mut positions = Vec::new();
    for frame in 0..3 {
        let (_, verts) = model.forward(&gt, frame).unwrap();
        for &v in &picks {
            positions.push(
                verts[v]
                    + Vector3::new(
                        rng.gen_range(-0.02..0.02),
                        rng.gen_range(-0.02..0.02),
                        rng.gen_range(-0.02..0.02),
                    ),
            );
        }
    }
    let ids = (0..6).map(|i| format!("m{i}")).collect();
    let markers3 = MarkerSequence::new(ids, 30.0, positions.clone(), vec![true; 18]).unwrap();
    let corr3 = Correspondence {
        vertex: picks.iter().map(|&v| Some(v as u32)).collect(),
    };
    let got = marker_offset_loss(&markers3, &corr3, &gt, &model, delta).unwrap();
    let mut sum = 0.0;
    for frame in 0..3 {
        let (_, verts) = model.forward(&gt, frame).unwrap();
        for (k, &v) in picks.iter().enumerate() {
            let d = (verts[v] - positions[frame * 6 + k]).norm();
            sum += (d - delta) * (d - delta);
        }
    }
    assert_relative_eq!(got, sum / 18.0, epsilon = 1e-12, max_relative = 1e-12);

    // unassigned visible marker is an error
    let bad = Correspondence { vertex: vec![None] };
    assert!(marker_offset_loss(&markers2, &bad, &params, &model, delta).is_err());
}

#[test]
fn stage3_picks_exact_vertex_and_matches_oracle() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 6, 30.0, 2);
    let valid = vec![true; 6];

    // a marker identical to vertex j in all frames maps to j
    let markers = markers_on_vertices(&model, &gt, &[42, 310, 650]);
    let corr = stage3_correspondence(&markers, &gt, &model, &valid).unwrap();
    assert_eq!(corr.vertex, vec![Some(42), Some(310), Some(650)]);

    // random markers match the exhaustive per-vertex average oracle
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut positions = Vec::new();
    for frame in 0..6 {
        let (_, verts) = model.forward(&gt, frame).unwrap();
        for k in 0..4 {
            let v = verts[(k * 97) % model.vertex_count()];
            positions.push(
                v + Vector3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                ),
            );
        }
    }
    let ids = (0..4).map(|i| format!("m{i}")).collect();
    let markers = MarkerSequence::new(ids, 30.0, positions.clone(), vec![true; 24]).unwrap();
    let corr = stage3_correspondence(&markers, &gt, &model, &valid).unwrap();
    for marker in 0..4 {
        let mut best = (f64::INFINITY, 0usize);
        for v in 0..model.vertex_count() {
            let mut sum = 0.0;
            for frame in 0..6 {
                let (_, verts) = model.forward(&gt, frame).unwrap();
                sum += (verts[v] - positions[frame * 4 + marker]).norm();
            }
            let avg = sum / 6.0;
            if avg < best.0 {
                best = (avg, v);
            }
        }
        assert_eq!(corr.vertex[marker], Some(best.1 as u32));
    }
}

#[test]
fn stage3_masking_uses_only_eligible_frames() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 5, 30.0, 3);
    // marker equals vertex 123 at frame 3 and is invisible elsewhere
    let target = 123usize;
    let mut positions = Vec::new();
    let mut visible = Vec::new();
    for frame in 0..5 {
        let (_, verts) = model.forward(&gt, frame).unwrap();
        if frame == 3 {
            positions.push(verts[target]);
            visible.push(true);
        } else {
            positions.push(Vector3::new(100.0, 100.0, 100.0));
            visible.push(false);
        }
    }
    let markers = MarkerSequence::new(vec!["m".into()], 30.0, positions, visible).unwrap();
    let corr = stage3_correspondence(&markers, &gt, &model, &vec![true; 5]).unwrap();
    assert_eq!(corr.vertex[0], Some(target as u32));

    // a marker visible only in prior-masked frames stays unassigned
    let mut masked = vec![true; 5];
    masked[3] = false;
    let corr = stage3_correspondence(&markers, &gt, &model, &masked).unwrap();
    assert_eq!(corr.vertex[0], None);
}

#[test]
fn stage2_zero_noise_round_trip() {
    let (model, gt, _) = walk_setup(3, 10, 11);
    let vertex_ids: Vec<usize> = (0..25).map(|k| (k * 31) % model.vertex_count()).collect();
    let markers = markers_on_vertices(&model, &gt, &vertex_ids);
    let prior = Prior::fully_valid(gt.clone());
    let config = SolverConfig::default();
    let out = stage2_pose_fit(&markers, &gt, 0.0, &prior, &model, &config).unwrap();
    assert!(out.diag.e3d <= 1e-6, "E3D {}", out.diag.e3d);
    for (a, b) in out.params.frames.iter().zip(&gt.frames) {
        assert!((a.gamma - b.gamma).norm() < 1e-3);
        for (ta, tb) in a.theta.iter().zip(&b.theta) {
            assert!((ta - tb).norm() < 1e-3);
        }
    }
    for (a, b) in out.params.beta.iter().zip(&gt.beta) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn stage2_invisible_marker_equals_deleted_marker() {
    let (model, gt, markers) = walk_setup(3, 8, 13);
    // append a marker that is never visible
    let t = markers.frame_count();
    let mut ids = markers.marker_ids().to_vec();
    ids.push("ghost".into());
    let mut positions = Vec::new();
    let mut visible = Vec::new();
    for frame in 0..t {
        for m in 0..markers.marker_count() {
            positions.push(markers.position(frame, m));
            visible.push(markers.is_visible(frame, m));
        }
        positions.push(Vector3::new(5.0, 5.0, 5.0));
        visible.push(false);
    }
    let with_ghost = MarkerSequence::new(ids, 30.0, positions, visible).unwrap();

    let prior = Prior::fully_valid(gt.clone());
    let mut config = SolverConfig::default();
    config.stage2.optim = config.stage2.optim.with_max_iters(25);
    let a = stage2_pose_fit(&markers, &gt, 0.3, &prior, &model, &config).unwrap();
    let b = stage2_pose_fit(&with_ghost, &gt, 0.3, &prior, &model, &config).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.yaw.to_bits(), b.yaw.to_bits());
}

#[test]
fn stage2_pure_regularizer_fixed_point() {
    let (model, gt, markers) = walk_setup(2, 6, 17);
    let prior = Prior::fully_valid(gt.clone());
    let mut config = SolverConfig::default();
    config.stage2.lambda_chamfer = 0.0;
    let out = stage2_pose_fit(&markers, &gt, 0.0, &prior, &model, &config).unwrap();
    assert_eq!(out.diag.iterations, 0);
    assert_eq!(out.diag.status, Status::ConvergedGrad);
    assert_eq!(out.params.beta, gt.beta);
    for (a, b) in out.params.frames.iter().zip(&gt.frames) {
        assert_eq!(a.theta, b.theta);
    }
}

#[test]
fn stage4_already_satisfied_converges_immediately() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 2, 30.0, 19);
    let config = SolverConfig::default();
    let chosen = [5usize, 50, 500, 800];
    let mut positions = Vec::new();
    for frame in 0..2 {
        let (_, verts) = model.forward(&gt, frame).unwrap();
        for &v in &chosen {
            positions.push(verts[v] + Vector3::new(0.0, config.delta, 0.0));
        }
    }
    let ids = (0..4).map(|i| format!("m{i}")).collect();
    let markers = MarkerSequence::new(ids, 30.0, positions, vec![true; 8]).unwrap();
    let corr = Correspondence {
        vertex: chosen.iter().map(|&v| Some(v as u32)).collect(),
    };
    let out = stage4_ik(
        &markers,
        &corr,
        &gt,
        &gt.frames,
        &vec![true; 2],
        &gt.beta,
        &model,
        &config,
    )
    .unwrap();
    assert_eq!(out.diag.iterations, 0);
    assert_eq!(out.params, gt);
}

#[test]
fn stage4_zero_marker_weight_returns_reference() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 2, 30.0, 23);
    let mut config = SolverConfig::default();
    config.stage4.lambda_marker = 0.0;

    // jitter the init away from the reference
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut init = gt.clone();
    for f in &mut init.frames {
        for t in &mut f.theta {
            *t += Vector3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
        }
    }
    for b in &mut init.beta {
        *b += rng.gen_range(-0.2..0.2);
    }

    let markers = markers_on_vertices(&model, &gt, &[7, 77]);
    let corr = Correspondence {
        vertex: vec![Some(7), Some(77)],
    };
    let out = stage4_ik(
        &markers,
        &corr,
        &init,
        &gt.frames,
        &vec![true; 2],
        &gt.beta,
        &model,
        &config,
    )
    .unwrap();
    for (a, b) in out.params.frames.iter().zip(&gt.frames) {
        for (ta, tb) in a.theta.iter().zip(&b.theta) {
            assert!((ta - tb).norm() < 1e-6, "{ta:?} vs {tb:?}");
        }
    }
    for (a, b) in out.params.beta.iter().zip(&gt.beta) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn stage5_zero_repeats_returns_inputs() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 2, 30.0, 29);
    let markers = markers_on_vertices(&model, &gt, &[1, 2, 3]);
    let corr = Correspondence {
        vertex: vec![Some(1), Some(2), Some(3)],
    };
    let prior = Prior::fully_valid(gt.clone());
    let mut config = SolverConfig::default();
    config.refinement_repeats = 0;
    let (params, out_corr, diags) =
        stage5_refine(&markers, &corr, &gt, &prior, &model, &config).unwrap();
    assert_eq!(params, gt);
    assert_eq!(out_corr, corr);
    assert!(diags.is_empty());
}

#[test]
fn stage5_correspondence_is_stage3_of_stage4_params() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 3, 30.0, 31);
    let layout = sample_layout(&model, 12, 31).unwrap();
    let markers = animate_markers(&model, &gt, &layout, 30.0).unwrap();
    let prior = Prior::fully_valid(gt.clone());
    let mut config = SolverConfig::default();
    config.stage4.optim = config.stage4.optim.with_max_iters(20);
    let corr0 = stage3_correspondence(&markers, &gt, &model, &prior.valid).unwrap();
    let (_, corr, _) = stage5_refine(&markers, &corr0, &gt, &prior, &model, &config).unwrap();
    let expect = stage3_correspondence(&markers, &gt, &model, &prior.valid).unwrap();
    assert_eq!(corr, expect);
}

#[test]
fn config_validation_rejects_bad_values() {
    let mut config = SolverConfig::default();
    config.yaw_hypotheses_deg.clear();
    assert!(config.validate().is_err());

    let mut config = SolverConfig::default();
    config.delta = 0.0;
    assert!(config.validate().is_err());

    let mut config = SolverConfig::default();
    config.stage2.lambda_theta = -1.0;
    assert!(config.validate().is_err());
}

#[test]
fn serializable_params_round_trip() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 4, 30.0, 37);
    let ser: SerializableParams = (&gt).into();
    assert_eq!(ser.to_params(), gt);
}
