//! Pose-guided refinement: pair selection, matching, epipolar verification,
//! triangulation, then alternating bundle adjustment and merge/complete
//! rounds. Each stage is timed.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{self, BAOptions, Termination};
use crate::mapping::{
    build_tracks, complete_points, filter_points, merge_points, register_images,
    triangulate_tracks, TriangulationThresholds,
};
use crate::matching::{match_pairs, verify_graph, MatchGraph, MatchOptions, View};
use crate::model_io::{FeatureSet, ImageObservation, SparseModel};
use crate::pairing::{select_pairs, NeighborRelation, PairingOptions};
use crate::ImageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PairSelection,
    Matching,
    Verification,
    Triangulation,
    BaLoop,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::PairSelection,
        Stage::Matching,
        Stage::Verification,
        Stage::Triangulation,
        Stage::BaLoop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PairSelection => "pair_selection",
            Stage::Matching => "matching",
            Stage::Verification => "verification",
            Stage::Triangulation => "triangulation",
            Stage::BaLoop => "ba_loop",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.as_str() == name)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Wall-clock seconds per completed stage, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<(Stage, f64)>,
}

impl StageTimings {
    pub fn record(&mut self, stage: Stage, seconds: f64) {
        self.stages.push((stage, seconds));
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|(_, s)| s).sum()
    }

    pub fn seconds(&self, stage: Stage) -> Option<f64> {
        self.stages
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, t)| *t)
    }

    /// Every stage in pipeline order; stages that did not complete get 0.
    pub fn zero_filled(&self) -> StageTimings {
        StageTimings {
            stages: Stage::ALL
                .iter()
                .map(|&s| (s, self.seconds(s).unwrap_or(0.0)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub k_nearest: usize,
    pub max_ray_angle_deg: f64,
    pub pair_relation: NeighborRelation,
    /// Features are extracted beforehand; larger sets are only reported.
    pub feature_budget: usize,
    pub matching: MatchOptions,
    pub verify_threshold_px: f64,
    pub thresholds: TriangulationThresholds,
    pub ba: BAOptions,
    pub max_outer_iters: usize,
    pub min_change_fraction: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            k_nearest: 50,
            max_ray_angle_deg: 60.0,
            pair_relation: NeighborRelation::Union,
            feature_budget: 8192,
            matching: MatchOptions::default(),
            verify_threshold_px: 8.0,
            thresholds: TriangulationThresholds::default(),
            ba: BAOptions::default(),
            max_outer_iters: 5,
            min_change_fraction: 0.001,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_nearest == 0 {
            return Err("k_nearest must be positive".into());
        }
        if !(self.max_ray_angle_deg > 0.0) {
            return Err("max_ray_angle_deg must be positive".into());
        }
        if self.feature_budget == 0 {
            return Err("feature_budget must be positive".into());
        }
        if !(self.verify_threshold_px > 0.0) {
            return Err("verify_threshold_px must be positive".into());
        }
        if self.max_outer_iters == 0 {
            return Err("max_outer_iters must be positive".into());
        }
        if !(self.min_change_fraction > 0.0 && self.min_change_fraction < 1.0) {
            return Err("min_change_fraction must lie in (0, 1)".into());
        }
        self.thresholds.validate().map_err(|e| e.to_string())?;
        self.ba.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn pairing(&self) -> PairingOptions {
        PairingOptions {
            k_nearest: self.k_nearest,
            max_ray_angle_deg: self.max_ray_angle_deg,
            relation: self.pair_relation,
        }
    }
}

/// Counts from one bundle adjustment + merge/complete round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub ba_iterations: usize,
    pub ba_termination: Termination,
    pub ba_initial_cost: f64,
    pub ba_final_cost: f64,
    pub mean_reproj_px: f64,
    pub merged: usize,
    /// Images that had lost every observation and were re-posed.
    pub registered_images: usize,
    pub added_observations: usize,
    pub filtered_observations: usize,
    pub filtered_points: usize,
    pub num_points: usize,
    pub num_observations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    pub model: SparseModel,
    pub timings: StageTimings,
    pub trace: Vec<IterationTrace>,
    pub num_pairs: usize,
    pub verified_matches: usize,
    /// Images that share no selected pair with any other image.
    pub isolated_images: Vec<ImageId>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no features for image {0}")]
    MissingFeatures(String),
    #[error("image {image} references unknown camera {camera}")]
    MissingCamera { image: String, camera: u32 },
    #[error("{stage}: {message}")]
    Stage { stage: Stage, message: String },
}

/// A failed run with the timings of the stages that completed.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{error}")]
pub struct RefineFailure {
    pub error: RefineError,
    pub timings: StageTimings,
}

impl RefineFailure {
    pub fn stage(&self) -> Option<Stage> {
        match self.error {
            RefineError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// True when a round changed fewer than `fraction` of the observations.
pub fn should_stop(merged: usize, added: usize, total_observations: usize, fraction: f64) -> bool {
    ((merged + added) as f64) < fraction * total_observations as f64
}

/// Images with at least one observation linked to a point; the rest are
/// dropped, as they were not reconstructed.
pub fn registered_only(model: &SparseModel) -> SparseModel {
    let mut out = model.clone();
    out.images.retain(|_, im| im.num_linked() > 0);
    out
}

struct Clock {
    timings: StageTimings,
}

impl Clock {
    fn run<T>(
        &mut self,
        stage: Stage,
        f: impl FnOnce() -> Result<T, String>,
    ) -> Result<T, RefineFailure> {
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(v) => {
                self.timings.record(stage, secs);
                Ok(v)
            }
            Err(message) => Err(RefineFailure {
                error: RefineError::Stage { stage, message },
                timings: self.timings.clone(),
            }),
        }
    }
}

/// Replaces every image's observations with its feature keypoints and drops
/// any existing points.
pub fn attach_features(
    initial: &SparseModel,
    features: &BTreeMap<String, FeatureSet>,
    feature_budget: usize,
) -> Result<SparseModel, RefineError> {
    let mut model = initial.clone();
    model.clear_points();
    for im in model.images.values_mut() {
        if !model.cameras.contains_key(&im.camera_id) {
            return Err(RefineError::MissingCamera {
                image: im.name.clone(),
                camera: im.camera_id,
            });
        }
        let f = features
            .get(&im.name)
            .ok_or_else(|| RefineError::MissingFeatures(im.name.clone()))?;
        if f.len() > feature_budget {
            log::warn!(
                "{}: {} features exceed the budget of {}",
                im.name,
                f.len(),
                feature_budget
            );
        }
        im.observations = f
            .keypoints
            .iter()
            .map(|&xy| ImageObservation::unlinked(xy))
            .collect();
    }
    Ok(model)
}

pub fn run_refinement(
    initial: &SparseModel,
    features: &BTreeMap<String, FeatureSet>,
    cfg: &RefineConfig,
) -> Result<RefineOutput, RefineFailure> {
    let fail = |error| RefineFailure {
        error,
        timings: StageTimings::default(),
    };
    cfg.validate().map_err(|m| fail(RefineError::Config(m)))?;
    let mut model = attach_features(initial, features, cfg.feature_budget).map_err(fail)?;
    let mut clock = Clock {
        timings: StageTimings::default(),
    };

    let pairs = clock.run(Stage::PairSelection, || {
        let poses = model.images.iter().map(|(&id, im)| (id, im.pose)).collect();
        let pairs = select_pairs(&poses, &cfg.pairing()).map_err(|e| e.to_string())?;
        if pairs.is_empty() {
            return Err("no image pairs selected".into());
        }
        Ok(pairs)
    })?;
    let mut paired = vec![false; 0];
    let ids: Vec<ImageId> = model.images.keys().copied().collect();
    paired.resize(ids.len(), false);
    for &(a, b) in &pairs.pairs {
        for id in [a, b] {
            if let Ok(i) = ids.binary_search(&id) {
                paired[i] = true;
            }
        }
    }
    let isolated_images: Vec<ImageId> = ids
        .iter()
        .zip(&paired)
        .filter(|(_, &p)| !p)
        .map(|(&id, _)| id)
        .collect();
    if !isolated_images.is_empty() {
        log::warn!(
            "{} images have no pair and stay unrefined",
            isolated_images.len()
        );
    }

    let graph = clock.run(Stage::Matching, || {
        let by_id: BTreeMap<ImageId, &FeatureSet> = model
            .images
            .iter()
            .map(|(&id, im)| (id, &features[&im.name]))
            .collect();
        match_pairs(&pairs.pairs, &by_id, &cfg.matching).map_err(|e| e.to_string())
    })?;

    let verified: MatchGraph = clock.run(Stage::Verification, || {
        let keypoints: BTreeMap<ImageId, &[nalgebra::Vector2<f64>]> = model
            .images
            .iter()
            .map(|(&id, im)| (id, features[&im.name].keypoints.as_slice()))
            .collect();
        let views: BTreeMap<ImageId, View<'_>> = model
            .images
            .iter()
            .map(|(&id, im)| {
                (
                    id,
                    View {
                        pose: &im.pose,
                        camera: &model.cameras[&im.camera_id].model,
                        keypoints: keypoints[&id],
                    },
                )
            })
            .collect();
        let (g, stats) =
            verify_graph(&graph, &views, cfg.verify_threshold_px).map_err(|e| e.to_string())?;
        log::info!(
            "verification kept {} of {} matches",
            stats.inlier_matches,
            stats.input_matches
        );
        if g.num_matches() == 0 {
            return Err("no matches survive epipolar verification".into());
        }
        Ok(g)
    })?;

    clock.run(Stage::Triangulation, || {
        let initial = TriangulationThresholds {
            max_reproj_px: f64::INFINITY,
            ..cfg.thresholds
        };
        let mut tracks = build_tracks(&verified);
        let stats =
            triangulate_tracks(&mut model, &mut tracks, &initial).map_err(|e| e.to_string())?;
        if stats.accepted == 0 {
            return Err(format!(
                "no tracks survive triangulation ({} tracks)",
                tracks.len()
            ));
        }
        Ok(())
    })?;

    let trace = clock.run(Stage::BaLoop, || {
        let mut trace = Vec::new();
        for iteration in 1..=cfg.max_outer_iters {
            let (refined, report) = bundle::solve(&model, &cfg.ba).map_err(|e| e.to_string())?;
            model = refined;
            let merged =
                merge_points(&mut model, &graph, &cfg.thresholds).map_err(|e| e.to_string())?;
            let registered =
                register_images(&mut model, &graph, &cfg.thresholds).map_err(|e| e.to_string())?;
            let added =
                complete_points(&mut model, &graph, &cfg.thresholds).map_err(|e| e.to_string())?;
            let filtered = filter_points(&mut model, &cfg.thresholds).map_err(|e| e.to_string())?;
            if model.points.is_empty() {
                return Err("every point was filtered out".into());
            }
            let total = model.num_linked_observations();
            trace.push(IterationTrace {
                iteration,
                ba_iterations: report.iterations,
                ba_termination: report.termination,
                ba_initial_cost: report.initial_cost,
                ba_final_cost: report.final_cost,
                mean_reproj_px: report.mean_reproj_after,
                merged,
                registered_images: registered.len(),
                added_observations: added,
                filtered_observations: filtered.removed_observations,
                filtered_points: filtered.removed_points,
                num_points: model.points.len(),
                num_observations: total,
            });
            if registered.is_empty() && should_stop(merged, added, total, cfg.min_change_fraction) {
                break;
            }
        }
        Ok(trace)
    })?;

    Ok(RefineOutput {
        model,
        timings: clock.timings,
        trace,
        num_pairs: pairs.len(),
        verified_matches: verified.num_matches(),
        isolated_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_predicate() {
        assert!(should_stop(0, 0, 1000, 0.001));
        assert!(!should_stop(1, 0, 1000, 0.001));
        assert!(should_stop(0, 1, 2000, 0.001));
        assert!(!should_stop(0, 2, 2000, 0.001));
    }

    #[test]
    fn zero_fill_keeps_order() {
        let mut t = StageTimings::default();
        t.record(Stage::PairSelection, 0.5);
        t.record(Stage::Matching, 1.5);
        let z = t.zero_filled();
        assert_eq!(z.stages.len(), 5);
        assert_eq!(z.total(), 2.0);
        assert_eq!(z.seconds(Stage::BaLoop), Some(0.0));
        assert_eq!(Stage::from_name("ba_loop"), Some(Stage::BaLoop));
    }

    #[test]
    fn config_validation() {
        assert!(RefineConfig::default().validate().is_ok());
        let bad = RefineConfig {
            min_change_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let parsed: Result<RefineConfig, _> = serde_json::from_str(r#"{"bogus": 1}"#);
        assert!(parsed.is_err());
    }
}
