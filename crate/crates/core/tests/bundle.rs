use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector2, Vector3};
use posebench_core::bundle::*;
use posebench_core::eval_poses::{evaluate, SimilarityTransform};
use posebench_core::geometry::{CameraModel, CameraModelKind, Pose};
use posebench_core::model_io::SparseModel;
use posebench_core::rng::SplitMix64;
use posebench_core::synth::{generate, perturb_poses, SynthConfig};
use proptest::prelude::*;
use rand::Rng;

fn random_camera(rng: &mut SplitMix64, kind: CameraModelKind) -> CameraModel {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let f = u(200.0, 1000.0);
    let params = match kind {
        CameraModelKind::SimplePinhole => vec![f, u(100.0, 500.0), u(100.0, 500.0)],
        CameraModelKind::Pinhole => vec![f, u(200.0, 1000.0), u(100.0, 500.0), u(100.0, 500.0)],
        CameraModelKind::SimpleRadial => vec![f, u(100.0, 500.0), u(100.0, 500.0), u(-0.1, 0.1)],
        CameraModelKind::Radial => vec![
            f,
            u(100.0, 500.0),
            u(100.0, 500.0),
            u(-0.1, 0.1),
            u(-0.05, 0.05),
        ],
        CameraModelKind::Opencv => vec![
            f,
            u(200.0, 1000.0),
            u(100.0, 500.0),
            u(100.0, 500.0),
            u(-0.1, 0.1),
            u(-0.05, 0.05),
            u(-0.01, 0.01),
            u(-0.01, 0.01),
        ],
        CameraModelKind::OpencvFisheye => vec![
            f,
            u(200.0, 1000.0),
            u(100.0, 500.0),
            u(100.0, 500.0),
            u(-0.05, 0.05),
            u(-0.05, 0.05),
            u(-0.01, 0.01),
            u(-0.01, 0.01),
        ],
    };
    CameraModel::new(kind, params).unwrap()
}

/// A camera, a pose and a point in front of it.
fn random_config(seed: u64) -> (CameraModel, Pose, Vector3<f64>) {
    let mut rng = SplitMix64::new(seed);
    let kind = CameraModelKind::ALL[(seed % 6) as usize];
    let cam = random_camera(&mut rng, kind);
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let rotation = UnitQuaternion::from_scaled_axis(axis * 3.0);
    let t = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
    let pose = Pose::new(rotation, t);
    let z = rng.random_range(1.0..10.0);
    let pc = Vector3::new(
        rng.random_range(-0.5..0.5) * z,
        rng.random_range(-0.5..0.5) * z,
        z,
    );
    let x = rotation.inverse() * (pc - t);
    (cam, pose, x)
}

fn rel_err(a: &DMatrix<f64>, n: &DMatrix<f64>) -> f64 {
    (a - n).amax() / n.amax().max(1.0)
}

fn numeric_jacobians(
    cam: &CameraModel,
    pose: &Pose,
    x: &Vector3<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let h = 1e-6;
    let r = |c: &CameraModel, p: &Pose, x: &Vector3<f64>| residual(c, p, x, &Vector2::zeros());
    let central = |f: &dyn Fn(f64) -> Vector2<f64>| (f(h) - f(-h)) / (2.0 * h);
    let mut jp = DMatrix::zeros(2, 6);
    for k in 0..6 {
        let col = central(&|e| {
            let mut d = Vector3::zeros();
            d[k % 3] = e;
            let p = if k < 3 {
                let q = UnitQuaternion::from_scaled_axis(d);
                Pose::new(q * pose.rotation(), q * pose.translation())
            } else {
                Pose::new(*pose.rotation(), pose.translation() + d)
            };
            r(cam, &p, x)
        });
        jp.set_column(k, &col);
    }
    let mut jx = DMatrix::zeros(2, 3);
    for k in 0..3 {
        let col = central(&|e| {
            let mut y = *x;
            y[k] += e;
            r(cam, pose, &y)
        });
        jx.set_column(k, &col);
    }
    let n = cam.params.len();
    let mut ji = DMatrix::zeros(2, n);
    for k in 0..n {
        let col = central(&|e| {
            let mut c = cam.clone();
            c.params[k] += e;
            r(&c, pose, x)
        });
        ji.set_column(k, &col);
    }
    (jp, jx, ji)
}

fn dyn2<C: nalgebra::Dim, S: nalgebra::Storage<f64, nalgebra::U2, C>>(
    m: &nalgebra::Matrix<f64, nalgebra::U2, C, S>,
) -> DMatrix<f64> {
    DMatrix::from_fn(2, m.ncols(), |i, k| m[(i, k)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn jacobians_match_central_differences(seed in any::<u64>()) {
        let (cam, pose, x) = random_config(seed);
        let j = jacobians(&cam, &pose, &x);
        prop_assert!(!j.behind);
        let (np, nx, ni) = numeric_jacobians(&cam, &pose, &x);
        prop_assert!(rel_err(&dyn2(&j.pose), &np) < 1e-5);
        prop_assert!(rel_err(&dyn2(&j.point), &nx) < 1e-5);
        let ai = dyn2(&j.intrinsics);
        prop_assert!(rel_err(&ai, &ni) < 1e-5, "{} {}", cam.kind, rel_err(&ai, &ni));
    }
}

#[test]
fn translation_z_derivative_vanishes_with_depth() {
    let cam = CameraModel::simple_pinhole(1000.0, 320.0, 240.0);
    let pose = Pose::identity();
    let dir = Vector3::new(0.1, 0.05, 1.0);
    let mut last = f64::INFINITY;
    for depth in [1.0, 1e2, 1e4, 1e6] {
        let j = jacobians(&cam, &pose, &(dir * depth));
        let d = j.pose.column(5).norm();
        assert!(d < last);
        last = d;
    }
    assert!(last < 1e-3, "{last}");
}

#[test]
fn simple_radial_zero_k_column() {
    let f = 700.0;
    let cam = CameraModel::new(CameraModelKind::SimpleRadial, vec![f, 300.0, 200.0, 0.0]).unwrap();
    let pose = Pose::identity();
    let x = Vector3::new(0.3, -0.2, 2.0);
    let (u, v) = (x.x / x.z, x.y / x.z);
    let r2 = u * u + v * v;
    let j = jacobians(&cam, &pose, &x);
    let col = j.intrinsics.column(3);
    assert!((col[0] - u * r2 * f).abs() < 1e-9);
    assert!((col[1] - v * r2 * f).abs() < 1e-9);
    let (_, _, ni) = numeric_jacobians(&cam, &pose, &x);
    assert!((ni[(0, 3)] - u * r2 * f).abs() < 1e-4);
}

fn scene(
    seed: u64,
    n_cameras: usize,
    n_points: usize,
    sigma: f64,
    kind: CameraModelKind,
) -> SparseModel {
    let camera = match kind {
        CameraModelKind::SimpleRadial => {
            CameraModel::new(kind, vec![500.0, 320.0, 240.0, 0.02]).unwrap()
        }
        _ => CameraModel::simple_pinhole(500.0, 320.0, 240.0),
    };
    generate(&SynthConfig {
        n_cameras,
        n_points,
        pixel_noise_sigma: sigma,
        camera,
        seed,
        ..Default::default()
    })
    .unwrap()
    .gt_model
}

/// `J^T W J + lambda D` solved densely, without eliminating anything. Point
/// unknowns share the mean diagonal entry of their block.
fn dense_step(lin: &Linearization, lambda: f64) -> DVector<f64> {
    let nc = lin.num_camera_params;
    let n = nc + lin.num_point_params;
    let m = 2 * lin.blocks.len();
    let mut j = DMatrix::<f64>::zeros(m, n);
    let mut r = DVector::<f64>::zeros(m);
    let mut w = DVector::<f64>::zeros(m);
    for (i, b) in lin.blocks.iter().enumerate() {
        for row in 0..2 {
            r[2 * i + row] = b.residual[row];
            w[2 * i + row] = b.weight;
            for (a, &c) in b.camera_cols.iter().enumerate() {
                j[(2 * i + row, c)] = b.j_camera[(row, a)];
            }
            if let Some(pc) = b.point_col {
                for k in 0..3 {
                    j[(2 * i + row, nc + pc + k)] = b.j_point[(row, k)];
                }
            }
        }
    }
    let wj = DMatrix::from_fn(m, n, |i, k| w[i] * j[(i, k)]);
    let mut h = j.transpose() * &wj;
    let g = wj.transpose() * &r;
    let diag: Vec<f64> = (0..n).map(|i| h[(i, i)]).collect();
    for i in 0..n {
        let d = if i < nc {
            diag[i]
        } else {
            let p = nc + (i - nc) / 3 * 3;
            (diag[p] + diag[p + 1] + diag[p + 2]) / 3.0
        };
        h[(i, i)] += lambda * d.clamp(1e-6, 1e32);
    }
    h.lu().solve(&(-g)).unwrap()
}

#[test]
fn schur_step_matches_dense_normal_equations() {
    for seed in 0..20u64 {
        let kind = if seed % 2 == 0 {
            CameraModelKind::SimplePinhole
        } else {
            CameraModelKind::SimpleRadial
        };
        let gt = scene(
            seed,
            4 + (seed % 3) as usize,
            20 + (seed as usize % 4) * 10,
            1.0,
            kind,
        );
        let model = perturb_poses(&gt, 1.0, 0.01, seed);
        let opts = BAOptions::default();
        let problem = BundleProblem::new(&model, &opts).unwrap();
        let lin = problem.linearize(&model);
        for lambda in [1e-4, 1.0] {
            let s = problem.schur_step(&lin, lambda).unwrap();
            let d = dense_step(&lin, lambda);
            let diff = (&s - &d).amax();
            assert!(
                diff < 1e-8 * d.amax().max(1.0),
                "seed {seed} lambda {lambda}: {diff}"
            );
        }
    }
}

#[test]
fn noiseless_model_is_left_alone() {
    let gt = scene(3, 8, 100, 0.0, CameraModelKind::SimplePinhole);
    let (out, report) = solve(&gt, &BAOptions::default()).unwrap();
    assert!(report.iterations <= 1);
    assert_eq!(report.termination, Termination::Converged);
    for (id, im) in &gt.images {
        let p = &out.images[id].pose;
        assert!((p.translation() - im.pose.translation()).norm() < 1e-10);
        assert!(p.rotation().angle_to(im.pose.rotation()) < 1e-10);
    }
    for (id, p) in &gt.points {
        assert!((out.points[id].xyz - p.xyz).norm() < 1e-10);
    }
}

fn mean_rotation_error(est: &SparseModel, gt: &SparseModel) -> f64 {
    let (_, report) = evaluate(est, gt, true).unwrap();
    report
        .registered
        .iter()
        .map(|v| v.rotation_error_deg)
        .sum::<f64>()
        / report.registered.len() as f64
}

#[test]
fn noisy_scene_recovers_poses() {
    for seed in 0..20u64 {
        let gt = scene(100 + seed, 12, 800, 0.5, CameraModelKind::SimplePinhole);
        let start = perturb_poses(&gt, 1.0, 0.01, seed);
        let (out, report) = solve(&start, &BAOptions::default()).unwrap();
        assert!(
            (0.3..=0.7).contains(&report.mean_reproj_after),
            "seed {seed}: {}",
            report.mean_reproj_after
        );
        let before = mean_rotation_error(&start, &gt);
        let after = mean_rotation_error(&out, &gt);
        assert!(after * 10.0 <= before, "seed {seed}: {before} -> {after}");
        assert!(report.final_cost <= report.initial_cost + 1e-12);
        for w in report.cost_history.windows(2) {
            assert!(w[1] < w[0]);
        }
    }
}

/// Robust cost of `model` with the observation `(image, index)` moved back to `xy`.
fn inlier_cost(model: &SparseModel, obs: (u32, usize), xy: Vector2<f64>, opts: &BAOptions) -> f64 {
    let mut m = model.clone();
    m.images.get_mut(&obs.0).unwrap().observations[obs.1].xy = xy;
    BundleProblem::new(&m, opts).unwrap().cost(&m)
}

#[test]
fn huber_resists_a_single_outlier() {
    let gt = scene(7, 8, 150, 0.5, CameraModelKind::SimplePinhole);
    let start = perturb_poses(&gt, 0.5, 0.005, 7);
    let pid = *start.points.keys().next().unwrap();
    let el = start.points[&pid].track[0];
    let obs = (el.image_id, el.obs_index as usize);
    let clean_xy = start.images[&obs.0].observations[obs.1].xy;
    let mut corrupted = start.clone();
    corrupted.images.get_mut(&obs.0).unwrap().observations[obs.1].xy += Vector2::new(200.0, 0.0);

    for (loss, robust) in [
        (RobustLoss::Huber { delta_px: 1.0 }, true),
        (RobustLoss::None, false),
    ] {
        let opts = BAOptions {
            robust_loss: loss,
            ..Default::default()
        };
        let (clean, _) = solve(&start, &opts).unwrap();
        let (dirty, _) = solve(&corrupted, &opts).unwrap();
        let reference = BundleProblem::new(&clean, &opts).unwrap().cost(&clean);
        let with_outlier = inlier_cost(&dirty, obs, clean_xy, &opts);
        let ratio = with_outlier / reference;
        if robust {
            assert!(ratio < 1.05, "huber: {ratio}");
        } else {
            assert!(ratio > 1.05, "least squares: {ratio}");
        }
    }
}

#[test]
fn similarity_transform_does_not_change_the_result() {
    let gt = scene(11, 8, 120, 0.5, CameraModelKind::SimplePinhole);
    let start = perturb_poses(&gt, 1.0, 0.01, 11);
    let t = SimilarityTransform {
        scale: 2.5,
        rotation: UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
        translation: Vector3::new(3.0, -1.0, 2.0),
    };
    let moved = t.apply_model(&start);
    let (_, a) = solve(&start, &BAOptions::default()).unwrap();
    let (_, b) = solve(&moved, &BAOptions::default()).unwrap();
    assert!(
        (a.mean_reproj_after - b.mean_reproj_after).abs() < 1e-8,
        "{} vs {}",
        a.mean_reproj_after,
        b.mean_reproj_after
    );
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn gauge_anchors_follow_observation_counts() {
    let gt = scene(5, 6, 80, 0.0, CameraModelKind::SimplePinhole);
    let problem = BundleProblem::new(&gt, &BAOptions::default()).unwrap();
    assert_eq!(problem.anchors.len(), 1);
    let mut counts: Vec<(usize, u32)> = gt
        .images
        .values()
        .map(|im| (im.num_linked(), im.image_id))
        .collect();
    counts.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let (first, second) = problem.anchors[0];
    assert_eq!(first, counts[0].1);
    assert_eq!(second.unwrap().0, counts[1].1);
    // 6 pose unknowns per image, minus the anchor and one translation, plus focal and k.
    assert_eq!(problem.num_camera_params(), 6 * 6 - 7 + 1);
}

#[test]
fn rejects_bad_input() {
    let gt = scene(5, 6, 80, 0.0, CameraModelKind::SimplePinhole);
    let mut opts = BAOptions::default();
    opts.refine = RefineFlags {
        poses: false,
        points: false,
        focal: false,
        principal_point: false,
        distortion: false,
    };
    assert!(matches!(
        solve(&gt, &opts),
        Err(BundleError::InvalidOptions(_))
    ));
    let mut empty = gt.clone();
    empty.clear_points();
    assert_eq!(
        solve(&empty, &BAOptions::default()).unwrap_err(),
        BundleError::TooFewImages(0)
    );
}
