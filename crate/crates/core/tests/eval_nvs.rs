use std::collections::BTreeMap;

use posebench_core::eval_nvs::*;
use posebench_core::model_io::{MetricKind, MetricRecord, MetricTable};
use posebench_core::rng::SplitMix64;
use proptest::prelude::*;
use rand::Rng;

/// Direct SSIM: every window position, weights from the 2D Gaussian, two-pass moments.
fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let n = 11usize;
    let mut w2 = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in w2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut channel_sum = 0.0;
    for c in 0..a.channels() {
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height() - n {
            for x0 in 0..=a.width() - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let w = w2[i][j] / total;
                        ma += w * a.get(x0 + j, y0 + i, c);
                        mb += w * b.get(x0 + j, y0 + i, c);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let w = w2[i][j] / total;
                        let da = a.get(x0 + j, y0 + i, c) - ma;
                        let db = b.get(x0 + j, y0 + i, c) - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        channel_sum += sum / count as f64;
    }
    channel_sum / a.channels() as f64
}

fn random_image(rng: &mut SplitMix64, w: usize, h: usize, c: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, c, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

#[test]
fn ssim_matches_naive_reference() {
    let mut rng = SplitMix64::new(2024);
    for i in 0..50 {
        let (w, h) = (rng.random_range(11..24), rng.random_range(11..24));
        let c = if i % 2 == 0 { 1 } else { 3 };
        let a = random_image(&mut rng, w, h, c);
        // Correlated pair: b is a blend of a and fresh noise.
        let t = rng.random_range(0.0..1.0);
        let b = ImageBuffer::from_fn(w, h, c, |x, y, ch| {
            t * a.get(x, y, ch) + (1.0 - t) * rng.random_range(0.0..1.0)
        })
        .unwrap();
        let fast = ssim(&a, &b).unwrap();
        let slow = naive_ssim(&a, &b);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }
}

#[test]
fn ssim_constant_offset() {
    let a = ImageBuffer::from_fn(16, 16, 1, |_, _, _| 0.4).unwrap();
    let b = ImageBuffer::from_fn(16, 16, 1, |_, _, _| 0.5).unwrap();
    let got = ssim(&a, &b).unwrap();
    assert!((got - naive_ssim(&a, &b)).abs() < 1e-9);
    let c1 = 0.01f64.powi(2);
    let closed = (2.0 * 0.4 * 0.5 + c1) / (0.16 + 0.25 + c1);
    assert!((got - closed).abs() < 1e-9);
}

#[test]
fn ssim_inverted_checkerboard_is_negative() {
    let a = ImageBuffer::from_fn(16, 16, 1, |x, y, _| ((x + y) % 2) as f64).unwrap();
    let b = ImageBuffer::from_fn(16, 16, 1, |x, y, _| 1.0 - a.get(x, y, 0)).unwrap();
    assert!(ssim(&a, &b).unwrap() < 0.0);
}

#[test]
fn psnr_decreases_with_noise() {
    let mut rng = SplitMix64::new(1);
    let a = ImageBuffer::from_fn(20, 20, 3, |_, _, _| rng.random_range(0.2..0.8)).unwrap();
    let pattern: Vec<f64> = (0..a.samples().len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let samples: Vec<f64> = a
            .samples()
            .iter()
            .zip(&pattern)
            .map(|(x, p)| x + amp * p)
            .collect();
        let b = ImageBuffer::new(20, 20, 3, samples).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!(p < last);
        last = p;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let a = random_image(&mut rng, 12, 13, 3);
        let b = random_image(&mut rng, 12, 13, 3);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s.abs() <= 1.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

fn view(psnr: f64, ssim: f64, lpips: Option<f64>) -> ViewMetrics {
    ViewMetrics {
        psnr: Some(psnr),
        ssim: Some(ssim),
        lpips,
    }
}

fn set(scene: &str, expected: &[&str], views: &[(&str, ViewMetrics)]) -> SceneMetricSet {
    SceneMetricSet {
        scene: scene.into(),
        expected_test_views: expected.iter().map(|s| s.to_string()).collect(),
        views: views.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
        render_failed: false,
    }
}

#[test]
fn missing_views_are_penalized() {
    let s = set("a", &["v1", "v2"], &[("v1", view(20.0, 0.8, Some(0.2)))]);
    let m = aggregate_scene(&s).unwrap();
    assert_eq!(m.psnr, 10.0);
    assert_eq!(m.ssim, 0.4);
    assert_eq!(m.lpips, Some(0.6));
}

#[test]
fn failed_render_is_fully_penalized() {
    let mut s = set("a", &["v1"], &[("v1", view(30.0, 0.9, Some(0.1)))]);
    s.render_failed = true;
    let m = aggregate_scene(&s).unwrap();
    assert_eq!((m.psnr, m.ssim, m.lpips), (0.0, 0.0, Some(1.0)));
}

#[test]
fn complete_scene_is_a_plain_mean() {
    let s = set(
        "a",
        &["v1", "v2", "v3"],
        &[
            ("v1", view(21.0, 0.7, None)),
            ("v2", view(24.0, 0.8, None)),
            ("v3", view(f64::INFINITY, 1.0, None)),
        ],
    );
    let m = aggregate_scene(&s).unwrap();
    assert!((m.psnr - (21.0 + 24.0 + DEFAULT_PSNR_CAP) / 3.0).abs() < 1e-12);
    assert!((m.ssim - 2.5 / 3.0).abs() < 1e-12);
    assert_eq!(m.lpips, None);
    let capped = aggregate_scene_with(&s, 50.0).unwrap();
    assert!((capped.psnr - (21.0 + 24.0 + 50.0) / 3.0).abs() < 1e-12);
}

#[test]
fn dataset_means() {
    let a = set("a", &["v"], &[("v", view(20.0, 0.5, Some(0.3)))]);
    let b = set("b", &["v"], &[("v", view(30.0, 0.7, Some(0.1)))]);
    let m = aggregate_dataset(&[a.clone(), b]).unwrap();
    assert_eq!(m.psnr, 25.0);
    assert!((m.ssim - 0.6).abs() < 1e-12);
    assert!((m.lpips.unwrap() - 0.2).abs() < 1e-12);

    let mut failed = set("f", &["v"], &[]);
    failed.render_failed = true;
    let ok = set("g", &["v"], &[("v", view(24.0, 0.8, None))]);
    let m = aggregate_dataset(&[failed, ok]).unwrap();
    assert_eq!(m.psnr, 12.0);
    assert_eq!(m.lpips, None);

    assert_eq!(
        aggregate_dataset(std::slice::from_ref(&a)).unwrap(),
        aggregate_scene(&a).unwrap()
    );
    assert!(matches!(aggregate_dataset(&[]), Err(NvsError::NoScenes)));
}

#[test]
fn invalid_scene_sets() {
    assert!(matches!(
        aggregate_scene(&set("a", &[], &[])),
        Err(NvsError::NoExpectedViews(_))
    ));
    assert!(matches!(
        aggregate_scene(&set("a", &["v1"], &[("v9", view(1.0, 1.0, None))])),
        Err(NvsError::UnexpectedView { .. })
    ));
}

#[test]
fn table_round_trip() {
    let s = set(
        "room",
        &["a", "b"],
        &[
            ("a", view(20.0, 0.5, Some(0.3))),
            ("b", view(22.0, 0.6, None)),
        ],
    );
    let mut table = MetricTable::default();
    table.scenes.insert("room".into(), s.to_records());
    let back = SceneMetricSet::from_table(&table, &BTreeMap::new());
    assert_eq!(back, vec![s.clone()]);
    let mut expected = BTreeMap::new();
    expected.insert(
        "room".to_string(),
        vec!["a".to_string(), "b".to_string(), "c".to_string()],
    );
    let with_missing = &SceneMetricSet::from_table(&table, &expected)[0];
    assert!((aggregate_scene(with_missing).unwrap().psnr - 14.0).abs() < 1e-12);
    assert_eq!(
        s.to_records()[0],
        MetricRecord {
            scene: "room".into(),
            view: "a".into(),
            metric: MetricKind::Psnr,
            value: 20.0
        }
    );
}

#[test]
fn loads_png_and_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let rgb = image::RgbImage::from_fn(3, 2, |x, y| {
        image::Rgb([(x * 100) as u8, (y * 255) as u8, 7])
    });
    let png = dir.path().join("a.png");
    let ppm = dir.path().join("a.ppm");
    rgb.save(&png).unwrap();
    rgb.save(&ppm).unwrap();
    for p in [&png, &ppm] {
        let img = ImageBuffer::load(p).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (3, 2, 3));
        assert!((img.get(2, 1, 0) - 200.0 / 255.0).abs() < 1e-12);
        assert_eq!(img.get(0, 1, 1), 1.0);
    }
    let gray16 = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(2, 2, |x, _| {
        image::Luma([x as u16 * 65535])
    });
    let p16 = dir.path().join("g.png");
    gray16.save(&p16).unwrap();
    let img = ImageBuffer::load(&p16).unwrap();
    assert_eq!(img.channels(), 1);
    assert_eq!(img.get(1, 0, 0), 1.0);
    assert!(ImageBuffer::load(&dir.path().join("missing.png")).is_err());
}
