use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector3};
use posebench_core::eval_poses::evaluate;
use posebench_core::geometry::Pose;
use posebench_core::model_io::FeatureSet;
use posebench_core::refine::*;
use posebench_core::synth::{generate, scene_diameter, SynthConfig, SynthScene};

fn features(s: &SynthScene) -> BTreeMap<String, FeatureSet> {
    s.features
        .values()
        .map(|f| (f.image_name.clone(), f.clone()))
        .collect()
}

fn noisy(seed: u64) -> SynthScene {
    generate(&SynthConfig {
        // Sparser rings can break into components joined by no verified pair.
        n_cameras: 20,
        n_points: 200,
        pixel_noise_sigma: 0.5,
        rot_noise_deg: 1.0,
        pos_noise_frac: 0.01,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn noiseless_scene_is_a_fixed_point() {
    let s = generate(&SynthConfig {
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let out = run_refinement(&s.initial_model, &features(&s), &RefineConfig::default()).unwrap();
    let diam = scene_diameter(&s.gt_model);
    let (_, report) = evaluate(&registered_only(&out.model), &s.gt_model, false).unwrap();
    assert!(report.unregistered.is_empty());
    for v in &report.registered {
        assert!(v.rotation_error_deg < 1e-6, "{v:?}");
        assert!(v.position_error < 1e-9 * diam, "{v:?}");
    }
    for t in &out.trace[1..] {
        assert_eq!((t.merged, t.added_observations), (0, 0));
    }
    assert!(out.trace[0].mean_reproj_px < 1e-6);
}

#[test]
fn noisy_refinement_improves_poses() {
    let s = noisy(3);
    let out = run_refinement(&s.initial_model, &features(&s), &RefineConfig::default()).unwrap();
    let mean_rot = |m| {
        let (_, r) = evaluate(m, &s.gt_model, true).unwrap();
        r.registered
            .iter()
            .map(|v| v.rotation_error_deg)
            .sum::<f64>()
            / r.registered.len() as f64
    };
    let before = mean_rot(&s.initial_model);
    let after = mean_rot(&registered_only(&out.model));
    assert!(after < before / 5.0, "{before} -> {after}");
    out.model.validate().unwrap();
    assert!(out.trace.len() <= RefineConfig::default().max_outer_iters);
}

#[test]
fn repeated_runs_are_identical() {
    let s = noisy(8);
    let f = features(&s);
    let cfg = RefineConfig::default();
    let a = run_refinement(&s.initial_model, &f, &cfg).unwrap();
    let b = run_refinement(&s.initial_model, &f, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.verified_matches, b.verified_matches);
}

#[test]
fn timings_sum_to_total() {
    let s = noisy(1);
    let out = run_refinement(&s.initial_model, &features(&s), &RefineConfig::default()).unwrap();
    let stages: Vec<Stage> = out.timings.stages.iter().map(|(s, _)| *s).collect();
    assert_eq!(stages, Stage::ALL.to_vec());
    let sum: f64 = out.timings.stages.iter().map(|(_, t)| t).sum();
    assert!((out.timings.total() - sum).abs() < 1e-6);
    assert!(out.timings.stages.iter().all(|(_, t)| *t >= 0.0));
}

#[test]
fn camera_facing_the_sky_is_isolated() {
    let s = generate(&SynthConfig {
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let mut initial = s.initial_model.clone();
    let id = *initial.images.keys().nth(4).unwrap();
    let im = initial.images.get_mut(&id).unwrap();
    let flip = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2);
    let center = im.pose.center();
    let rotation = flip * im.pose.rotation();
    im.pose = Pose::new(rotation, -(rotation * center));
    let out = run_refinement(&initial, &features(&s), &RefineConfig::default()).unwrap();
    assert_eq!(out.isolated_images, vec![id]);
    assert_eq!(out.model.images[&id].num_linked(), 0);
    let kept = registered_only(&out.model);
    assert!(!kept.images.contains_key(&id));
    let (_, report) = evaluate(&kept, &s.gt_model, false).unwrap();
    assert_eq!(report.unregistered.len(), 1);
    assert!(report
        .registered
        .iter()
        .all(|v| v.rotation_error_deg < 1e-6));
}

#[test]
fn failures_name_their_stage() {
    let s = noisy(4);
    let f = features(&s);

    let cfg = RefineConfig {
        verify_threshold_px: 1e-9,
        ..Default::default()
    };
    let err = run_refinement(&s.initial_model, &f, &cfg).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Verification));
    let filled = err.timings.zero_filled();
    assert_eq!(filled.seconds(Stage::Triangulation), Some(0.0));
    assert_eq!(filled.seconds(Stage::BaLoop), Some(0.0));
    assert!(err.timings.seconds(Stage::Matching).is_some());
    assert!(err.to_string().starts_with("verification"));

    let mut single = s.initial_model.clone();
    let first = *single.images.keys().next().unwrap();
    single.images.retain(|&id, _| id == first);
    let err = run_refinement(&single, &f, &RefineConfig::default()).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::PairSelection));
    assert!(err.timings.stages.is_empty());

    let mut missing = f.clone();
    let name = missing.keys().next().unwrap().clone();
    missing.remove(&name);
    let err = run_refinement(&s.initial_model, &missing, &RefineConfig::default()).unwrap_err();
    assert_eq!(err.error, RefineError::MissingFeatures(name));

    let cfg = RefineConfig {
        max_outer_iters: 0,
        ..Default::default()
    };
    let err = run_refinement(&s.initial_model, &f, &cfg).unwrap_err();
    assert!(matches!(err.error, RefineError::Config(_)));
}

#[test]
fn config_rejects_unknown_fields() {
    let cfg: RefineConfig = serde_json::from_str(r#"{"k_nearest": 7}"#).unwrap();
    assert_eq!(cfg.k_nearest, 7);
    assert_eq!(cfg.max_outer_iters, RefineConfig::default().max_outer_iters);
    assert!(serde_json::from_str::<RefineConfig>(r#"{"k_nearst": 7}"#).is_err());
}
