//! The benchmark driver: refine every scene of a config, evaluate it, and
//! write `runtimes.csv`, `metrics.csv`, `accuracy.csv` and `config.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use posebench_core::eval_nvs::{aggregate_scene, SceneMetricSet};
use posebench_core::eval_poses::{accuracy_at, evaluate, PoseErrorReport};
use posebench_core::model_io::{
    read_features_for_images, read_metric_table, read_model, write_model, FeatureSet, ModelFormat,
    SparseModel,
};
use posebench_core::refine::{registered_only, run_refinement, RefineConfig, StageTimings};
use posebench_core::synth::{generate, scene_diameter, SynthConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::report::{self, AccuracyRow, MetricRow, RuntimeRow, TradeoffSource};
use crate::{CliError, Staged};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub accuracy: AccuracySpec,
    pub scenes: Vec<SceneSpec>,
}

fn default_label() -> String {
    "default".into()
}

/// Thresholds for `accuracy.csv`. With `relative_to_diameter`, position
/// errors are divided by the ground-truth scene diameter first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccuracySpec {
    pub rot_thresholds_deg: Vec<f64>,
    pub pos_thresholds: Vec<f64>,
    pub relative_to_diameter: bool,
    pub with_scale: bool,
}

impl Default for AccuracySpec {
    fn default() -> Self {
        Self {
            rot_thresholds_deg: vec![1.0, 5.0],
            pos_thresholds: vec![0.01, 0.05],
            relative_to_diameter: true,
            with_scale: true,
        }
    }
}

/// Either a synthetic scene or a model directory with features; relative
/// paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    /// Per-view `scene,view,metric,value` table of the renders of this scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nvs_metrics: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_views: Option<Vec<String>>,
    /// Replaces the run-level refinement config for this scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineConfig>,
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).at("config")?;
        let mut cfg: BenchConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut cfg.scenes {
            for p in [&mut s.model, &mut s.features, &mut s.gt, &mut s.nvs_metrics]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Structural checks only; see [`BenchConfig::check_inputs`].
    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| CliError::new("config", m);
        if self.scenes.is_empty() {
            return Err(err("no scenes".into()));
        }
        let mut names = BTreeSet::new();
        for s in &self.scenes {
            if s.name.is_empty() || !names.insert(s.name.as_str()) {
                return Err(err(format!(
                    "scene names must be unique and non-empty: '{}'",
                    s.name
                )));
            }
            match (&s.synth, &s.model, &s.features) {
                (Some(_), None, None) => {
                    if s.gt.is_some() {
                        return Err(err(format!(
                            "{}: synthetic scenes bring their own ground truth",
                            s.name
                        )));
                    }
                }
                (None, Some(_), Some(_)) => {}
                _ => {
                    return Err(err(format!(
                        "{}: give either `synth` or both `model` and `features`",
                        s.name
                    )))
                }
            }
            if let Some(c) = &s.synth {
                c.validate().map_err(|e| err(format!("{}: {e}", s.name)))?;
            }
            s.refine
                .as_ref()
                .unwrap_or(&self.refine)
                .validate()
                .map_err(|e| err(format!("{}: {e}", s.name)))?;
        }
        let a = &self.accuracy;
        if a.rot_thresholds_deg.is_empty() || a.pos_thresholds.is_empty() {
            return Err(err("accuracy thresholds must not be empty".into()));
        }
        if a.rot_thresholds_deg
            .iter()
            .chain(&a.pos_thresholds)
            .any(|t| !(*t >= 0.0))
        {
            return Err(err("accuracy thresholds must be non-negative".into()));
        }
        Ok(())
    }

    /// Opens every input the run would read, without keeping anything.
    pub fn check_inputs(&self) -> Result<(), CliError> {
        for s in &self.scenes {
            let stage = format!("load {}", s.name);
            if let (Some(model), Some(features)) = (&s.model, &s.features) {
                let m = load_model(model).at(&stage)?;
                read_features_for_images(features, m.images.values().map(|im| im.name.as_str()))
                    .at(&stage)?;
            }
            if let Some(gt) = &s.gt {
                load_model(gt).at(&stage)?;
            }
            if let Some(p) = &s.nvs_metrics {
                read_metric_table(p).at(&stage)?;
            }
        }
        Ok(())
    }
}

pub fn load_model(dir: &Path) -> Result<SparseModel, CliError> {
    let format = ModelFormat::detect(dir).ok_or_else(|| {
        CliError::new(
            "load",
            format!("{}: no cameras.bin or cameras.txt", dir.display()),
        )
    })?;
    read_model(dir, format).at("load")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub name: String,
    /// Zero-filled: stages after a failure are recorded as 0 s.
    pub timings: StageTimings,
    pub metrics: BTreeMap<String, f64>,
    pub failed_stage: Option<String>,
    pub pose_report: Option<PoseErrorReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub config: BenchConfig,
    pub scenes: Vec<SceneResult>,
}

impl TradeoffSource for BenchRun {
    fn label(&self) -> &str {
        &self.config.label
    }

    fn scene_results(&self) -> Vec<(&str, &StageTimings, &BTreeMap<String, f64>)> {
        self.scenes
            .iter()
            .map(|s| (s.name.as_str(), &s.timings, &s.metrics))
            .collect()
    }
}

struct Inputs {
    initial: SparseModel,
    features: BTreeMap<String, FeatureSet>,
    gt: Option<SparseModel>,
}

fn load_inputs(s: &SceneSpec) -> Result<Inputs, CliError> {
    let stage = format!("load {}", s.name);
    if let Some(c) = &s.synth {
        let scene = generate(c).at(&stage)?;
        return Ok(Inputs {
            initial: scene.initial_model,
            features: scene
                .features
                .into_values()
                .map(|f| (f.image_name.clone(), f))
                .collect(),
            gt: Some(scene.gt_model),
        });
    }
    let (Some(model), Some(features)) = (&s.model, &s.features) else {
        return Err(CliError::new(stage, "no inputs"));
    };
    let initial = load_model(model).at(&stage)?;
    let features =
        read_features_for_images(features, initial.images.values().map(|im| im.name.as_str()))
            .at(&stage)?;
    let gt = s.gt.as_deref().map(load_model).transpose().at(&stage)?;
    Ok(Inputs {
        initial,
        features,
        gt,
    })
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn accuracy_metric_name(rot: f64, pos: f64) -> String {
    format!("accuracy_r{rot}_p{pos}")
}

/// Runs one scene; never fails, a failing stage is recorded instead.
pub fn run_scene(cfg: &BenchConfig, spec: &SceneSpec, save_model: Option<&Path>) -> SceneResult {
    let mut result = SceneResult {
        name: spec.name.clone(),
        timings: StageTimings::default().zero_filled(),
        metrics: BTreeMap::new(),
        failed_stage: None,
        pose_report: None,
    };
    let inputs = match load_inputs(spec) {
        Ok(i) => i,
        Err(e) => {
            log::error!("{e}");
            result.failed_stage = Some("load".into());
            result.metrics.insert("failed".into(), 1.0);
            return result;
        }
    };
    let refine_cfg = spec.refine.as_ref().unwrap_or(&cfg.refine);
    let start = Instant::now();
    let outcome = run_refinement(&inputs.initial, &inputs.features, refine_cfg);
    log::info!(
        "{}: refinement took {:.2} s",
        spec.name,
        start.elapsed().as_secs_f64()
    );
    let refined = match outcome {
        Ok(out) => {
            result.timings = out.timings.zero_filled();
            result
                .metrics
                .insert("outer_iterations".into(), out.trace.len() as f64);
            result
                .metrics
                .insert("num_points".into(), out.model.points.len() as f64);
            if let Some(dir) = save_model {
                if let Err(e) = write_model(&out.model, &dir.join(&spec.name), ModelFormat::Binary)
                {
                    log::error!("{}: saving model: {e}", spec.name);
                }
            }
            Some(out.model)
        }
        Err(fail) => {
            log::error!("{}: {fail}", spec.name);
            result.timings = fail.timings.zero_filled();
            result.failed_stage = Some(fail.stage().map_or("setup".to_string(), |s| s.to_string()));
            None
        }
    };
    result
        .metrics
        .insert("failed".into(), if refined.is_some() { 0.0 } else { 1.0 });

    if let Some(gt) = &inputs.gt {
        let mut report = match &refined {
            Some(m) => evaluate(&registered_only(m), gt, cfg.accuracy.with_scale)
                .map(|(_, r)| r)
                .unwrap_or_else(|e| {
                    log::warn!(
                        "{}: alignment failed ({e}); counting every view as unregistered",
                        spec.name
                    );
                    all_unregistered(gt)
                }),
            None => all_unregistered(gt),
        };
        if cfg.accuracy.relative_to_diameter {
            let d = scene_diameter(gt);
            if d > 0.0 {
                for v in &mut report.registered {
                    v.position_error /= d;
                }
            }
        }
        let m = &mut result.metrics;
        m.insert(
            "registered_fraction".into(),
            report.registered.len() as f64 / report.total_views().max(1) as f64,
        );
        if let Some(r) = median(
            report
                .registered
                .iter()
                .map(|v| v.rotation_error_deg)
                .collect(),
        ) {
            m.insert("rot_err_median_deg".into(), r);
        }
        if let Some(p) = median(report.registered.iter().map(|v| v.position_error).collect()) {
            m.insert("pos_err_median".into(), p);
        }
        for &rot in &cfg.accuracy.rot_thresholds_deg {
            for &pos in &cfg.accuracy.pos_thresholds {
                if let Ok(a) = accuracy_at(std::slice::from_ref(&report), rot, pos) {
                    m.insert(accuracy_metric_name(rot, pos), a);
                }
            }
        }
        result.pose_report = Some(report);
    }

    if let Some(path) = &spec.nvs_metrics {
        match nvs_summary(spec, path, refined.is_none()) {
            Ok(s) => {
                result.metrics.insert("psnr".into(), s.psnr);
                result.metrics.insert("ssim".into(), s.ssim);
                if let Some(l) = s.lpips {
                    result.metrics.insert("lpips".into(), l);
                }
            }
            Err(e) => log::error!("{e}"),
        }
    }
    result
}

fn all_unregistered(gt: &SparseModel) -> PoseErrorReport {
    PoseErrorReport {
        registered: Vec::new(),
        unregistered: gt.images.values().map(|im| im.name.clone()).collect(),
    }
}

fn nvs_summary(
    spec: &SceneSpec,
    path: &Path,
    render_failed: bool,
) -> Result<posebench_core::eval_nvs::MetricSummary, CliError> {
    let stage = format!("eval-nvs {}", spec.name);
    let table = read_metric_table(path).at(&stage)?;
    let mut expected = BTreeMap::new();
    if let Some(v) = &spec.test_views {
        expected.insert(spec.name.clone(), v.clone());
    }
    let mut set = SceneMetricSet::from_table(&table, &expected)
        .into_iter()
        .find(|s| s.scene == spec.name)
        .unwrap_or_else(|| SceneMetricSet {
            scene: spec.name.clone(),
            expected_test_views: spec.test_views.clone().unwrap_or_default(),
            ..Default::default()
        });
    set.render_failed = render_failed;
    if render_failed && set.expected_test_views.is_empty() {
        return Ok(posebench_core::eval_nvs::MetricSummary::FAILED);
    }
    aggregate_scene(&set).at(&stage)
}

/// Runs all scenes, `jobs` at a time, keeping config order in the output.
pub fn run_bench(
    cfg: &BenchConfig,
    jobs: usize,
    save_models: Option<&Path>,
) -> Result<BenchRun, CliError> {
    let scenes = if jobs <= 1 {
        cfg.scenes
            .iter()
            .map(|s| run_scene(cfg, s, save_models))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .at("bench")?;
        pool.install(|| {
            cfg.scenes
                .par_iter()
                .map(|s| run_scene(cfg, s, save_models))
                .collect()
        })
    };
    Ok(BenchRun {
        config: cfg.clone(),
        scenes,
    })
}

pub fn accuracy_rows(run: &BenchRun) -> Vec<AccuracyRow> {
    let reports: Vec<PoseErrorReport> = run
        .scenes
        .iter()
        .filter_map(|s| s.pose_report.clone())
        .collect();
    let a = &run.config.accuracy;
    let mut rows = Vec::new();
    for &rot in &a.rot_thresholds_deg {
        for &pos in &a.pos_thresholds {
            if let Ok(p) = accuracy_at(&reports, rot, pos) {
                rows.push(AccuracyRow {
                    rot_thresh_deg: rot,
                    pos_thresh: pos,
                    percentage: p,
                });
            }
        }
    }
    rows
}

pub const RUNTIMES_FILE: &str = "runtimes.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const CONFIG_FILE: &str = "config.json";

impl BenchRun {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).at("write")?;
        let runtimes: Vec<RuntimeRow> = self
            .scenes
            .iter()
            .flat_map(|s| report::runtime_rows(&s.name, &s.timings))
            .collect();
        report::write_rows(
            &dir.join(RUNTIMES_FILE),
            &runtimes,
            &report::RUNTIMES_HEADER,
        )
        .at("write")?;
        let metrics: Vec<MetricRow> = self
            .scenes
            .iter()
            .flat_map(|s| report::metric_rows(&s.name, &s.metrics))
            .collect();
        report::write_rows(&dir.join(METRICS_FILE), &metrics, &report::METRICS_HEADER)
            .at("write")?;
        report::write_rows(
            &dir.join(ACCURACY_FILE),
            &accuracy_rows(self),
            &report::ACCURACY_HEADER,
        )
        .at("write")?;
        let json = serde_json::to_string_pretty(&self.config).at("write")?;
        std::fs::write(dir.join(CONFIG_FILE), json + "\n").at("write")?;
        Ok(())
    }

    /// Reads a run directory written by [`BenchRun::write`]. Pose reports
    /// are not stored and come back empty.
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let stage = format!("read {}", dir.display());
        let text = std::fs::read_to_string(dir.join(CONFIG_FILE)).at(&stage)?;
        let config: BenchConfig = serde_json::from_str(&text).at(&stage)?;
        let timings = report::read_runtimes(&dir.join(RUNTIMES_FILE)).at(&stage)?;
        let mut metrics: BTreeMap<String, BTreeMap<String, f64>> =
            report::read_metrics(&dir.join(METRICS_FILE))
                .at(&stage)?
                .into_iter()
                .collect();
        let scenes = timings
            .into_iter()
            .map(|(name, timings)| {
                let metrics = metrics.remove(&name).unwrap_or_default();
                SceneResult {
                    failed_stage: None,
                    pose_report: None,
                    name,
                    timings,
                    metrics,
                }
            })
            .collect();
        Ok(BenchRun { config, scenes })
    }
}
