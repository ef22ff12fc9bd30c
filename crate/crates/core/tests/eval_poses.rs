use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use posebench_core::eval_poses::*;
use posebench_core::geometry::{rotation_error_deg, Pose};
use posebench_core::rng::SplitMix64;
use posebench_core::synth::{generate, image_name, perturb_poses_detailed, SynthConfig};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_points(rng: &mut SplitMix64, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn random_similarity(rng: &mut SplitMix64) -> SimilarityTransform {
    let axis = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    SimilarityTransform {
        scale: 10f64.powf(rng.random_range(-1.0..1.0)),
        rotation: UnitQuaternion::from_scaled_axis(axis.normalize() * rng.random_range(0.0..3.1)),
        translation: Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0)),
    }
}

fn residual(t: &SimilarityTransform, xs: &[Vector3<f64>], ys: &[Vector3<f64>]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (t.apply(x) - y).norm_squared())
        .sum()
}

fn close(a: &SimilarityTransform, b: &SimilarityTransform, tol: f64) -> bool {
    (a.scale - b.scale).abs() < tol
        && a.rotation.angle_to(&b.rotation) < tol
        && (a.translation - b.translation).norm() < tol
}

#[test]
fn recovers_known_similarities() {
    let mut rng = SplitMix64::new(10);
    for _ in 0..100 {
        let xs = random_points(&mut rng, 10);
        let t = random_similarity(&mut rng);
        let ys: Vec<_> = xs.iter().map(|x| t.apply(x)).collect();
        let r = align_umeyama(&xs, &ys, true).unwrap();
        assert!(
            close(&r, &t, 1e-9 * t.translation.norm().max(1.0)),
            "{r:?} vs {t:?}"
        );
    }
}

#[test]
fn quarter_turn_example() {
    let mut rng = SplitMix64::new(3);
    let xs = random_points(&mut rng, 10);
    let t = SimilarityTransform {
        scale: 2.0,
        rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2),
        translation: Vector3::new(1.0, 0.0, 0.0),
    };
    let ys: Vec<_> = xs.iter().map(|x| t.apply(x)).collect();
    assert!(close(&align_umeyama(&xs, &ys, true).unwrap(), &t, 1e-9));
    let rigid = align_umeyama(&xs, &xs, false).unwrap();
    assert!(close(&rigid, &SimilarityTransform::identity(), 1e-12));
}

/// Best proper rotation by trying every sign pattern on the SVD factors.
fn brute_force_rotation_fit(xs: &[Vector3<f64>], ys: &[Vector3<f64>]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<Vector3<f64>>() / n;
    let my = ys.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (x, y) in xs.iter().zip(ys) {
        cov += (y - my) * (x - mx).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut best = f64::INFINITY;
    for signs in 0..8u32 {
        let s = Matrix3::from_diagonal(&Vector3::from_fn(|i, _| {
            if signs >> i & 1 == 1 {
                -1.0
            } else {
                1.0
            }
        }));
        let r = u * s * vt;
        if r.determinant() < 0.0 {
            continue;
        }
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        // Optimal scale for this rotation.
        let (mut num, mut den) = (0.0, 0.0);
        for (x, y) in xs.iter().zip(ys) {
            num += (rot * (x - mx)).dot(&(y - my));
            den += (x - mx).norm_squared();
        }
        let t = SimilarityTransform {
            scale: (num / den).max(1e-12),
            rotation: rot,
            translation: my - rot * mx * (num / den).max(1e-12),
        };
        best = best.min(residual(&t, xs, ys));
    }
    best
}

#[test]
fn mirrored_sets_give_proper_rotations() {
    let mut rng = SplitMix64::new(77);
    for _ in 0..20 {
        let xs = random_points(&mut rng, 12);
        let ys: Vec<_> = xs
            .iter()
            .map(|x| Vector3::new(-x.x, x.y, x.z) * 1.5 + Vector3::new(0.2, 0.0, 1.0))
            .collect();
        let r = align_umeyama(&xs, &ys, true).unwrap();
        assert!((r.rotation.to_rotation_matrix().matrix().determinant() - 1.0).abs() < 1e-12);
        let got = residual(&r, &xs, &ys);
        let oracle = brute_force_rotation_fit(&xs, &ys);
        assert!(
            (got - oracle).abs() < 1e-9 * oracle.max(1.0),
            "{got} vs {oracle}"
        );
    }
}

#[test]
fn inverse_round_trip() {
    let mut rng = SplitMix64::new(5);
    for _ in 0..50 {
        let t = random_similarity(&mut rng);
        let x = random_points(&mut rng, 1)[0];
        assert!((t.inverse().apply(&t.apply(&x)) - x).norm() < 1e-9);
        assert!((t.compose(&t.inverse()).apply(&x) - x).norm() < 1e-9);
    }
}

#[test]
fn ransac_ignores_gross_outliers() {
    let mut rng = SplitMix64::new(9);
    let xs = random_points(&mut rng, 20);
    let t = random_similarity(&mut rng);
    let mut ys: Vec<_> = xs.iter().map(|x| t.apply(x)).collect();
    ys[3] += Vector3::new(50.0, 0.0, 0.0);
    ys[11] -= Vector3::new(0.0, 80.0, 0.0);
    let plain = align_umeyama(&xs, &ys, true).unwrap();
    assert!(!close(&plain, &t, 1e-3));
    let (robust, inliers) = align_umeyama_ransac(&xs, &ys, true, 0.5, 200, 1).unwrap();
    assert!(close(&robust, &t, 1e-8 * t.translation.norm().max(1.0)));
    assert_eq!(inliers.iter().filter(|&&b| !b).count(), 2);
    assert!(!inliers[3] && !inliers[11]);
}

fn gt_model() -> posebench_core::model_io::SparseModel {
    generate(&SynthConfig {
        n_cameras: 10,
        n_points: 40,
        seed: 8,
        ..Default::default()
    })
    .unwrap()
    .gt_model
}

#[test]
fn self_comparison_is_zero() {
    let gt = gt_model();
    let (t, report) = evaluate(&gt, &gt, true).unwrap();
    assert!(close(&t, &SimilarityTransform::identity(), 1e-9));
    assert!(report.unregistered.is_empty());
    assert_eq!(report.registered.len(), 10);
    let report = pose_errors(&gt, &gt, &SimilarityTransform::identity()).unwrap();
    for v in &report.registered {
        assert_eq!(v.position_error, 0.0);
        assert!(v.rotation_error_deg < 1e-6);
    }
}

#[test]
fn missing_view_is_unregistered() {
    let gt = gt_model();
    let mut est = gt.clone();
    est.images.remove(&4);
    let report = pose_errors(&est, &gt, &SimilarityTransform::identity()).unwrap();
    assert_eq!(report.unregistered, vec![image_name(4)]);
    assert_eq!(report.total_views(), 10);
    let mut other = gt.clone();
    for im in other.images.values_mut() {
        im.name = format!("x_{}", im.name);
    }
    assert_eq!(
        pose_errors(&other, &gt, &SimilarityTransform::identity()),
        Err(EvalError::NoOverlap)
    );
}

#[test]
fn rotation_perturbation_is_reported_exactly() {
    let gt = gt_model();
    let mut est = gt.clone();
    let mut rng = SplitMix64::new(4);
    for im in est.images.values_mut() {
        let axis = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let q = UnitQuaternion::from_scaled_axis(axis * 0.5f64.to_radians());
        im.pose = Pose::from_center(im.pose.rotation() * q, &im.pose.center());
    }
    let report = pose_errors(&est, &gt, &SimilarityTransform::identity()).unwrap();
    for v in &report.registered {
        assert!(
            (v.rotation_error_deg - 0.5).abs() < 1e-6,
            "{}",
            v.rotation_error_deg
        );
        assert!(v.position_error < 1e-9);
    }
}

#[test]
fn injected_noise_matches_reported_errors() {
    let gt = gt_model();
    let (est, injected) = perturb_poses_detailed(&gt, 2.0, 0.02, 12);
    let report = pose_errors(&est, &gt, &SimilarityTransform::identity()).unwrap();
    for (v, n) in report.registered.iter().zip(&injected) {
        assert_eq!(v.name, image_name(n.image_id));
        assert!((v.rotation_error_deg - n.rotation_deg).abs() < 1e-9);
        assert!((v.position_error - n.center_offset).abs() < 1e-9);
    }
}

#[test]
fn aligned_errors_ignore_a_global_similarity() {
    let gt = gt_model();
    let (noisy, _) = perturb_poses_detailed(&gt, 1.0, 0.01, 3);
    let mut rng = SplitMix64::new(21);
    let moved = random_similarity(&mut rng).apply_model(&noisy);
    let (_, a) = evaluate(&noisy, &gt, true).unwrap();
    let (_, b) = evaluate(&moved, &gt, true).unwrap();
    for (x, y) in a.registered.iter().zip(&b.registered) {
        assert!((x.position_error - y.position_error).abs() < 1e-9);
        assert!((x.rotation_error_deg - y.rotation_error_deg).abs() < 1e-7);
    }
    // Rotation errors agree with the direct definition.
    let (t, _) = evaluate(&moved, &gt, true).unwrap();
    let im = &moved.images[&1];
    let direct = rotation_error_deg(
        &(im.pose.rotation() * t.rotation.inverse()),
        gt.images[&1].pose.rotation(),
    );
    assert!((direct - b.registered[0].rotation_error_deg).abs() < 1e-12);
}

#[test]
fn accuracy_edge_cases() {
    let exact = PoseErrorReport {
        registered: vec![ViewError {
            name: "a".into(),
            rotation_error_deg: 0.0,
            position_error: 0.0,
        }],
        unregistered: vec![],
    };
    assert_eq!(
        accuracy_at(std::slice::from_ref(&exact), 1.0, 0.05).unwrap(),
        100.0
    );
    assert_eq!(
        accuracy_curve(std::slice::from_ref(&exact), 5.0, &[0.05, 0.10]).unwrap(),
        vec![(0.05, 100.0), (0.10, 100.0)]
    );
    let missing = PoseErrorReport {
        registered: vec![],
        unregistered: vec!["a".into(), "b".into()],
    };
    assert_eq!(accuracy_at(&[missing], 10.0, 10.0).unwrap(), 0.0);
}

fn arb_view() -> impl Strategy<Value = Option<(f64, f64)>> {
    prop::option::weighted(0.8, (0.0..10.0f64, 0.0..0.5f64))
}

fn reports_from(views: &[Option<(f64, f64)>], groups: &[usize]) -> Vec<PoseErrorReport> {
    let n = groups.iter().copied().max().unwrap_or(0) + 1;
    let mut out = vec![PoseErrorReport::default(); n];
    for (i, (v, &g)) in views.iter().zip(groups).enumerate() {
        match v {
            Some((r, p)) => out[g].registered.push(ViewError {
                name: format!("v{i}"),
                rotation_error_deg: *r,
                position_error: *p,
            }),
            None => out[g].unregistered.push(format!("v{i}")),
        }
    }
    out
}

proptest! {
    #[test]
    fn accuracy_is_monotone_and_grouping_free(
        views in prop::collection::vec(arb_view(), 1..30),
        seed in any::<u64>(),
        r1 in 0.0..10.0f64, r2 in 0.0..10.0f64,
        p1 in 0.0..0.5f64, p2 in 0.0..0.5f64,
    ) {
        let mut rng = SplitMix64::new(seed);
        let groups: Vec<usize> = views.iter().map(|_| rng.random_range(0..4)).collect();
        let pooled = reports_from(&views, &vec![0; views.len()]);
        let grouped = reports_from(&views, &groups);
        let (rl, rh) = (r1.min(r2), r1.max(r2));
        let (pl, ph) = (p1.min(p2), p1.max(p2));
        let a = accuracy_at(&pooled, rl, pl).unwrap();
        prop_assert_eq!(a, accuracy_at(&grouped, rl, pl).unwrap());
        prop_assert!(a <= accuracy_at(&pooled, rh, pl).unwrap());
        prop_assert!(a <= accuracy_at(&pooled, rl, ph).unwrap());
        let curve = accuracy_curve(&grouped, rl, &[pl, ph]).unwrap();
        prop_assert!(curve[0].1 <= curve[1].1);
    }

    #[test]
    fn alignment_residual_survives_pre_transform(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let xs = random_points(&mut rng, 8);
        let ys: Vec<_> = random_points(&mut rng, 8).iter().zip(&xs).map(|(n, x)| x * 2.0 + n * 0.1).collect();
        let pre = random_similarity(&mut rng);
        let moved: Vec<_> = xs.iter().map(|x| pre.apply(x)).collect();
        let a = align_umeyama(&xs, &ys, true).unwrap();
        let b = align_umeyama(&moved, &ys, true).unwrap();
        let (ra, rb) = (residual(&a, &xs, &ys), residual(&b, &moved, &ys));
        prop_assert!((ra - rb).abs() < 1e-9 * ra.max(1.0));
        // b after pre recovers a.
        prop_assert!(close(&b.compose(&pre), &a, 1e-8 * a.translation.norm().max(1.0)));
    }
}
