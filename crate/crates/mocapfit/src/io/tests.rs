use nalgebra::Vector3;
use tempfile::tempdir;

use super::*;
use crate::body_model::procedural::humanoid;
use crate::body_model::BodyParams;
use crate::segmentation::MarkerSequence;
use crate::solver::SolverConfig;
use crate::synth::{animate_markers, sample_layout, scenario_motion, Scenario};

#[test]
fn model_file_round_trips_bit_exactly() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = humanoid();
    write_model_file(&path, &model).unwrap();
    let loaded = read_model_file(&path).unwrap();
    assert_eq!(loaded.bone_names, model.bone_names);
    assert_eq!(loaded.parents, model.parents);
    assert_eq!(loaded.faces, model.faces);
    assert_eq!(loaded.part_table, model.part_table);
    // bit-exact float arrays
    assert_eq!(loaded.template_vertices, model.template_vertices);
    assert_eq!(loaded.rest_joints, model.rest_joints);
    assert_eq!(loaded.lbs_weights, model.lbs_weights);
    assert_eq!(loaded.shape_basis, model.shape_basis);
    assert_eq!(loaded.joint_shape_basis, model.joint_shape_basis);

    // writing the loaded model reproduces the file byte for byte
    let path2 = dir.path().join("model2.json");
    write_model_file(&path2, &loaded).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn unknown_major_version_is_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("markers.json");
    let model = humanoid();
    let gt = scenario_motion(Scenario::Static, &model, 2, 30.0, 0);
    let layout = sample_layout(&model, 3, 0).unwrap();
    let markers = animate_markers(&model, &gt, &layout, 30.0).unwrap();
    write_marker_file(&path, &markers).unwrap();
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("\"format_version\": \"1.0\"", "\"format_version\": \"2.0\"");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(
        read_marker_file(&path),
        Err(crate::Error::FormatVersion { .. })
    ));
}

#[test]
fn marker_file_round_trip_is_stable() {
    let dir = tempdir().unwrap();
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 7, 30.0, 3);
    let layout = sample_layout(&model, 9, 3).unwrap();
    let markers = animate_markers(&model, &gt, &layout, 30.0).unwrap();
    let markers = crate::synth::dropout(&markers, 0.1, 3, 5).unwrap();

    let path = dir.path().join("a.json");
    write_marker_file(&path, &markers).unwrap();
    let loaded = read_marker_file(&path).unwrap().to_sequence().unwrap();
    assert_eq!(loaded.raw_visibility(), markers.raw_visibility());
    for t in 0..markers.frame_count() {
        for m in 0..markers.marker_count() {
            if markers.is_visible(t, m) {
                assert_eq!(loaded.position(t, m), markers.position(t, m));
            }
        }
    }
    let path2 = dir.path().join("b.json");
    write_marker_file(&path2, &loaded).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn ingest_markers_decimates_by_integer_factor() {
    let ids = vec!["a".to_string()];
    let positions: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, 1.0, 0.0)).collect();
    let seq = MarkerSequence::new(ids, 120.0, positions, vec![true; 10]).unwrap();
    let file = MarkerFile::from_sequence(&seq);
    let out = ingest_markers(&file, 30.0).unwrap();
    // every 4th frame kept, ceil(10/4) = 3 frames
    assert_eq!(out.frame_count(), 3);
    assert_eq!(out.position(0, 0).x, 0.0);
    assert_eq!(out.position(1, 0).x, 4.0);
    assert_eq!(out.position(2, 0).x, 8.0);
    assert_eq!(out.frame_rate(), 30.0);

    // non-integer factor is an error mentioning the nearest valid rate
    let err = ingest_markers(&file, 45.0).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("40"), "unexpected message: {text}");
}

#[test]
fn origin_samples_read_back_invisible() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(
        &path,
        r#"{"format_version":"1.0","frame_rate":30.0,"marker_ids":["a","b"],
           "frames":[[[0.0,0.0,0.0],[1.0,2.0,3.0]]]}"#,
    )
    .unwrap();
    let seq = read_marker_file(&path).unwrap().to_sequence().unwrap();
    assert!(!seq.is_visible(0, 0));
    assert!(seq.is_visible(0, 1));
}

#[test]
fn malformed_marker_file_reports_locus() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"format_version\": \"1.0\",\n  \"frame_rate\": oops}").unwrap();
    match read_marker_file(&path) {
        Err(crate::Error::Parse { locus, .. }) => {
            assert!(locus.contains("bad.json:2"), "locus {locus}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn prior_ingest_identity_when_fully_present() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 6, 30.0, 1);
    let file = PriorFile::from_params(&gt, &vec![true; 6], 30.0);
    let prior = ingest_prior(&file, 6).unwrap();
    assert_eq!(prior.params.frames, gt.frames);
    assert_eq!(prior.params.beta, gt.beta);
    assert!(prior.valid.iter().all(|&v| v));
}

#[test]
fn prior_ingest_is_idempotent() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 8, 30.0, 2);
    let file = PriorFile::from_params(&gt, &vec![true; 8], 30.0);
    let once = ingest_prior(&file, 8).unwrap();
    let refile = PriorFile::from_params(&once.params, &once.valid, 30.0);
    let twice = ingest_prior(&refile, 8).unwrap();
    assert_eq!(once.params, twice.params);
    assert_eq!(once.valid, twice.valid);
}

#[test]
fn prior_gap_interpolation_slerps_rotations() {
    let model = humanoid();
    let mut gt = scenario_motion(Scenario::Static, &model, 3, 30.0, 3);
    // rotation 0 -> 90 degrees about z across a gap at frame 1
    gt.frames[0].phi = Vector3::zeros();
    gt.frames[2].phi = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
    gt.frames[0].theta[4] = Vector3::zeros();
    gt.frames[2].theta[4] = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
    gt.frames[0].gamma = Vector3::new(0.0, 0.0, 0.0);
    gt.frames[2].gamma = Vector3::new(1.0, 2.0, 3.0);
    let file = PriorFile::from_params(&gt, &[true, false, true], 30.0);
    let prior = ingest_prior(&file, 3).unwrap();
    assert_eq!(prior.valid, vec![true, false, true]);
    let mid = &prior.params.frames[1];
    approx::assert_relative_eq!(
        mid.phi,
        Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_4),
        epsilon = 1e-9
    );
    approx::assert_relative_eq!(
        mid.theta[4],
        Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_4),
        epsilon = 1e-9
    );
    approx::assert_relative_eq!(mid.gamma, Vector3::new(0.5, 1.0, 1.5), epsilon = 1e-12);

    // a gap between identical rotations interpolates to the same rotation
    let mut gt2 = gt.clone();
    gt2.frames[2].phi = gt2.frames[0].phi;
    let file2 = PriorFile::from_params(&gt2, &[true, false, true], 30.0);
    let prior2 = ingest_prior(&file2, 3).unwrap();
    approx::assert_relative_eq!(prior2.params.frames[1].phi, gt2.frames[0].phi, epsilon = 1e-12);
}

#[test]
fn prior_leading_and_trailing_gaps_use_nearest_frame() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 5, 30.0, 4);
    let present = [false, false, true, false, false];
    let file = PriorFile::from_params(&gt, &present, 30.0);
    let prior = ingest_prior(&file, 5).unwrap();
    assert_eq!(prior.valid, present.to_vec());
    for t in [0usize, 1, 3, 4] {
        assert_eq!(prior.params.frames[t], prior.params.frames[2]);
    }
}

#[test]
fn prior_sequence_beta_is_componentwise_median() {
    let model = humanoid();
    let mut gt = scenario_motion(Scenario::Static, &model, 3, 30.0, 5);
    gt.beta = vec![0.0; 10];
    let mut file = PriorFile::from_params(&gt, &vec![true; 3], 30.0);
    // distinct per-frame betas: medians are the middle values
    for (i, frame) in file.frames.iter_mut().enumerate() {
        let mut beta = vec![0.0; 10];
        beta[0] = i as f64; // 0, 1, 2 -> median 1
        beta[1] = -(i as f64) * 2.0; // 0, -2, -4 -> median -2
        frame.beta = Some(beta);
    }
    let prior = ingest_prior(&file, 3).unwrap();
    assert_eq!(prior.params.beta[0], 1.0);
    assert_eq!(prior.params.beta[1], -2.0);
}

#[test]
fn prior_with_no_present_frames_is_an_error() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Static, &model, 2, 30.0, 6);
    let file = PriorFile::from_params(&gt, &[false, false], 30.0);
    assert!(ingest_prior(&file, 2).is_err());
}

#[test]
fn prior_rejects_non_increasing_frame_indices() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Static, &model, 3, 30.0, 7);
    let mut file = PriorFile::from_params(&gt, &vec![true; 3], 30.0);
    file.frames[2].frame = 1;
    assert!(ingest_prior(&file, 3).is_err());
}

#[test]
fn empty_config_reproduces_defaults() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, "{}\n").unwrap();
    let config = read_config_file(&path).unwrap();
    assert_eq!(config, SolverConfig::default());
}

#[test]
fn partial_config_overrides_only_named_fields() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        r#"{"delta": 0.01, "stage2": {"lambda_theta": 2.5}, "yaw_hypotheses_deg": [0.0, 180.0]}"#,
    )
    .unwrap();
    let config = read_config_file(&path).unwrap();
    assert_eq!(config.delta, 0.01);
    assert_eq!(config.stage2.lambda_theta, 2.5);
    assert_eq!(config.yaw_hypotheses_deg, vec![0.0, 180.0]);
    // untouched fields keep their defaults
    assert_eq!(config.stage2.lambda_chamfer, 10.0);
    assert_eq!(config.stage4.lambda_theta, 0.1);
    assert_eq!(config.refinement_repeats, 1);
}

#[test]
fn config_round_trip() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("config.json");
    let mut config = SolverConfig::default();
    config.delta = 0.012;
    config.parallel_hypotheses = false;
    write_config_file(&path, &config).unwrap();
    assert_eq!(read_config_file(&path).unwrap(), config);
}

#[test]
fn params_survive_prior_file_round_trip_bit_exactly() {
    let dir = tempdir().unwrap();
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 5, 30.0, 8);
    let path = dir.path().join("gt.json");
    write_prior_file(&path, &PriorFile::from_params(&gt, &vec![true; 5], 30.0)).unwrap();
    let loaded = read_prior_file(&path).unwrap();
    let prior = ingest_prior(&loaded, 5).unwrap();
    assert_eq!(prior.params.frames, gt.frames);
    let gt_file = PriorFile::from_params(&gt, &vec![true; 5], 30.0);
    let path2 = dir.path().join("gt2.json");
    write_prior_file(&path2, &gt_file).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn prior_ingest_truncates_and_pads_to_target_frames() {
    let model = humanoid();
    let gt = scenario_motion(Scenario::Walk, &model, 6, 30.0, 9);
    let file = PriorFile::from_params(&gt, &vec![true; 6], 30.0);
    // shorter target drops trailing records
    let short = ingest_prior(&file, 4).unwrap();
    assert_eq!(short.params.frame_count(), 4);
    assert_eq!(short.params.frames[..], gt.frames[..4]);
    // longer target pads with the last present frame, marked invalid
    let long = ingest_prior(&file, 8).unwrap();
    assert_eq!(long.params.frame_count(), 8);
    assert_eq!(long.params.frames[7], gt.frames[5]);
    assert!(!long.valid[7]);
    assert!(long.valid[5]);
}

#[test]
fn beta_median_uses_only_in_range_frames() {
    let params = BodyParams::zeros(2, 24, 2);
    let file = PriorFile::from_params(&params, &[true, true], 30.0);
    let prior = ingest_prior(&file, 2).unwrap();
    assert_eq!(prior.params.beta, vec![0.0, 0.0]);
}
