//! Novel-view-synthesis metrics: PSNR, SSIM and the penalized per-scene and
//! per-dataset aggregation. LPIPS values are ingested, never computed.

use std::collections::BTreeMap;
use std::path::Path;

use image::DynamicImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_io::{MetricKind, MetricRecord, MetricTable};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Value used in means for views with infinite PSNR.
pub const DEFAULT_PSNR_CAP: f64 = 100.0;
/// Every n-th image (by sorted name) is a test view.
pub const TEST_SPLIT_STRIDE: usize = 8;

/// Metric values assigned to missing views and failed scenes.
pub const PENALTY_PSNR: f64 = 0.0;
pub const PENALTY_SSIM: f64 = 0.0;
pub const PENALTY_LPIPS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum NvsError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("cannot load image {path}: {message}")]
    Load { path: String, message: String },
    #[error("scene {0} has no expected test views")]
    NoExpectedViews(String),
    #[error("scene {scene}: view {view} is not an expected test view")]
    UnexpectedView { scene: String, view: String },
    #[error("no scenes to aggregate")]
    NoScenes,
}

/// Row-major samples in `[0, 1]`, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        samples: Vec<f64>,
    ) -> Result<Self, NvsError> {
        if channels != 1 && channels != 3 {
            return Err(NvsError::InvalidImage(format!(
                "{channels} channels (expected 1 or 3)"
            )));
        }
        if samples.len() != width * height * channels {
            return Err(NvsError::InvalidImage(format!(
                "{} samples for {width}x{height}x{channels}",
                samples.len()
            )));
        }
        if let Some(s) = samples.iter().find(|s| !s.is_finite()) {
            return Err(NvsError::InvalidImage(format!("non-finite sample {s}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    /// Builds an image from `f(x, y, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, NvsError> {
        let mut samples = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    samples.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, samples)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    /// Loads a PNG (8 or 16 bit) or binary PPM/PGM. Gray images keep one
    /// channel, everything else becomes RGB; alpha is dropped.
    pub fn load(path: &Path) -> Result<Self, NvsError> {
        let err = |message: String| NvsError::Load {
            path: path.display().to_string(),
            message,
        };
        let img = image::open(path).map_err(|e| err(e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, samples): (usize, Vec<f64>) = match &img {
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => (
                1,
                img.to_luma8()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f64 / 255.0)
                    .collect(),
            ),
            DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => (
                1,
                img.to_luma16()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f64 / 65535.0)
                    .collect(),
            ),
            DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => (
                3,
                img.to_rgb8()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f64 / 255.0)
                    .collect(),
            ),
            DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => (
                3,
                img.to_rgb16()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f64 / 65535.0)
                    .collect(),
            ),
            _ => (
                3,
                img.to_rgb32f()
                    .into_raw()
                    .into_iter()
                    .map(|v| (v as f64).clamp(0.0, 1.0))
                    .collect(),
            ),
        };
        Self::new(w, h, channels, samples).map_err(|e| err(e.to_string()))
    }
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), NvsError> {
    if a.dims() != b.dims() {
        return Err(NvsError::DimensionMismatch(a.dims(), b.dims()));
    }
    if a.samples.is_empty() {
        return Err(NvsError::InvalidImage("empty image".into()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for data range 1; `+inf` for identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, NvsError> {
    check_dims(a, b)?;
    let mse = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.samples.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable "valid" filtering of a single-channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid window
/// positions, averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, NvsError> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(NvsError::TooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    let plane = |img: &ImageBuffer, c: usize| -> Vec<f64> {
        img.samples
            .iter()
            .skip(c)
            .step_by(img.channels)
            .copied()
            .collect()
    };
    let per_channel: Vec<f64> = (0..a.channels)
        .into_par_iter()
        .map(|c| ssim_channel(&plane(a, c), &plane(b, c), a.width, a.height))
        .collect();
    Ok(per_channel.iter().sum::<f64>() / a.channels as f64)
}

/// Metrics of one rendered test view; absent entries were not measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMetricSet {
    pub scene: String,
    pub expected_test_views: Vec<String>,
    pub views: BTreeMap<String, ViewMetrics>,
    pub render_failed: bool,
}

impl SceneMetricSet {
    pub fn validate(&self) -> Result<(), NvsError> {
        if self.expected_test_views.is_empty() {
            return Err(NvsError::NoExpectedViews(self.scene.clone()));
        }
        for v in self.views.keys() {
            if !self.expected_test_views.contains(v) {
                return Err(NvsError::UnexpectedView {
                    scene: self.scene.clone(),
                    view: v.clone(),
                });
            }
        }
        Ok(())
    }

    /// Groups a metric table into scenes. Views listed in `expected` define
    /// each scene's test split; scenes without an entry use the views present.
    pub fn from_table(
        table: &MetricTable,
        expected: &BTreeMap<String, Vec<String>>,
    ) -> Vec<SceneMetricSet> {
        table
            .scenes
            .iter()
            .map(|(scene, records)| {
                let mut views: BTreeMap<String, ViewMetrics> = BTreeMap::new();
                for r in records {
                    let v = views.entry(r.view.clone()).or_default();
                    match r.metric {
                        MetricKind::Psnr => v.psnr = Some(r.value),
                        MetricKind::Ssim => v.ssim = Some(r.value),
                        MetricKind::Lpips => v.lpips = Some(r.value),
                    }
                }
                let expected_test_views = expected
                    .get(scene)
                    .cloned()
                    .unwrap_or_else(|| views.keys().cloned().collect());
                SceneMetricSet {
                    scene: scene.clone(),
                    expected_test_views,
                    views,
                    render_failed: false,
                }
            })
            .collect()
    }

    /// The per-view records of this set, in view order.
    pub fn to_records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for (view, m) in &self.views {
            for (metric, value) in [
                (MetricKind::Psnr, m.psnr),
                (MetricKind::Ssim, m.ssim),
                (MetricKind::Lpips, m.lpips),
            ] {
                if let Some(value) = value {
                    out.push(MetricRecord {
                        scene: self.scene.clone(),
                        view: view.clone(),
                        metric,
                        value,
                    });
                }
            }
        }
        out
    }
}

/// Scene- or dataset-level means. `lpips` is `None` when it was not supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

impl MetricSummary {
    pub const FAILED: MetricSummary = MetricSummary {
        psnr: PENALTY_PSNR,
        ssim: PENALTY_SSIM,
        lpips: Some(PENALTY_LPIPS),
    };
}

pub fn aggregate_scene(s: &SceneMetricSet) -> Result<MetricSummary, NvsError> {
    aggregate_scene_with(s, DEFAULT_PSNR_CAP)
}

/// Means over the expected test views. Missing views and missing
/// PSNR/SSIM values count with the penalty values; a failed render gives the
/// penalty for the whole scene. LPIPS is reported only if some view has it.
pub fn aggregate_scene_with(s: &SceneMetricSet, psnr_cap: f64) -> Result<MetricSummary, NvsError> {
    s.validate()?;
    if s.render_failed {
        return Ok(MetricSummary::FAILED);
    }
    let n = s.expected_test_views.len() as f64;
    let has_lpips = s.views.values().any(|v| v.lpips.is_some());
    let (mut p, mut q, mut l) = (0.0, 0.0, 0.0);
    for name in &s.expected_test_views {
        let v = s.views.get(name).copied().unwrap_or_default();
        p += v.psnr.map_or(PENALTY_PSNR, |x| x.min(psnr_cap));
        q += v.ssim.unwrap_or(PENALTY_SSIM);
        l += v.lpips.unwrap_or(PENALTY_LPIPS);
    }
    Ok(MetricSummary {
        psnr: p / n,
        ssim: q / n,
        lpips: has_lpips.then_some(l / n),
    })
}

/// Unweighted mean of scene-level summaries. LPIPS is dropped (with a
/// warning) unless every scene reports it.
pub fn aggregate_summaries(scenes: &[MetricSummary]) -> Result<MetricSummary, NvsError> {
    if scenes.is_empty() {
        return Err(NvsError::NoScenes);
    }
    let n = scenes.len() as f64;
    let lpips = if scenes.iter().all(|s| s.lpips.is_some()) {
        Some(scenes.iter().filter_map(|s| s.lpips).sum::<f64>() / n)
    } else {
        if scenes.iter().any(|s| s.lpips.is_some()) {
            log::warn!("lpips missing for some scenes; skipping it in the dataset mean");
        }
        None
    };
    Ok(MetricSummary {
        psnr: scenes.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: scenes.iter().map(|s| s.ssim).sum::<f64>() / n,
        lpips,
    })
}

pub fn aggregate_dataset(scenes: &[SceneMetricSet]) -> Result<MetricSummary, NvsError> {
    let summaries = scenes
        .iter()
        .map(aggregate_scene)
        .collect::<Result<Vec<_>, _>>()?;
    aggregate_summaries(&summaries)
}

/// Test views when the split is not given explicitly: every eighth image by
/// sorted name, starting with the first.
pub fn default_test_split(image_names: &[String]) -> Vec<String> {
    let mut names = image_names.to_vec();
    names.sort();
    names.dedup();
    names.into_iter().step_by(TEST_SPLIT_STRIDE).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(w: usize, h: usize, v: f64) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 1, |_, _, _| v).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = constant(4, 4, 0.25);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = constant(4, 4, 0.75);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!(
            psnr(&constant(4, 4, 0.0), &constant(4, 4, 1.0))
                .unwrap()
                .abs()
                < 1e-9
        );
        assert!(matches!(
            psnr(&a, &constant(4, 5, 0.0)),
            Err(NvsError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn ssim_basics() {
        let a = ImageBuffer::from_fn(16, 16, 3, |x, y, c| {
            ((x * 7 + y * 3 + c) % 11) as f64 / 10.0
        })
        .unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            ssim(&constant(10, 20, 0.0), &constant(10, 20, 0.0)),
            Err(NvsError::TooSmall { .. })
        ));
    }

    #[test]
    fn image_validation() {
        assert!(ImageBuffer::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn split_every_eighth() {
        let names: Vec<String> = (0..20).rev().map(|i| format!("{i:03}.png")).collect();
        assert_eq!(
            default_test_split(&names),
            vec!["000.png", "008.png", "016.png"]
        );
    }
}
