//! Feature tracks, their triangulation, and the merge/complete/filter
//! operators run between bundle adjustment rounds.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{refine_pose, RobustLoss};
use crate::geometry::{max_triangulation_angle_deg, reprojection_error, triangulate, Observation};
use crate::matching::MatchGraph;
use crate::model_io::{Point3DRecord, SparseModel, TrackElement};
use crate::{ImageId, PointId};

#[derive(Debug, Error, PartialEq)]
pub enum MappingError {
    #[error("track references image {0} which has no pose")]
    UnposedImage(ImageId),
    #[error("image {image_id} has no observation {index}")]
    ObservationOutOfRange { image_id: ImageId, index: u32 },
    #[error("observation {index} of image {image_id} already belongs to point {point}")]
    ObservationInUse {
        image_id: ImageId,
        index: u32,
        point: PointId,
    },
    #[error("invalid triangulation thresholds: {0}")]
    InvalidThresholds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    /// Coincident centers, parallel rays or a point at infinity.
    Degenerate,
    /// Fewer than the minimum number of elements survived outlier removal.
    TooShort,
    /// Best pairwise ray angle below the minimum.
    SmallAngle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Untriangulated,
    Triangulated(PointId),
    Rejected(RejectReason),
}

/// Keypoints believed to observe one scene point, at most one per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Track {
    /// `(image_id, keypoint_index)`, sorted.
    pub elements: Vec<(ImageId, u32)>,
    pub status: TrackStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriangulationThresholds {
    pub max_reproj_px: f64,
    pub min_tri_angle_deg: f64,
    pub min_track_len: usize,
}

impl Default for TriangulationThresholds {
    fn default() -> Self {
        Self {
            max_reproj_px: 4.0,
            min_tri_angle_deg: 1.5,
            min_track_len: 2,
        }
    }
}

impl TriangulationThresholds {
    pub fn validate(&self) -> Result<(), MappingError> {
        if !(self.max_reproj_px >= 0.0) || !(self.min_tri_angle_deg >= 0.0) {
            return Err(MappingError::InvalidThresholds(format!(
                "max_reproj_px {} and min_tri_angle_deg {} must be non-negative",
                self.max_reproj_px, self.min_tri_angle_deg
            )));
        }
        if self.min_track_len < 2 {
            return Err(MappingError::InvalidThresholds(format!(
                "min_track_len must be at least 2, got {}",
                self.min_track_len
            )));
        }
        Ok(())
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn push(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Connected components of the keypoint correspondence graph.
///
/// Matches are visited in pair order. A match that would join two components
/// already holding different keypoints of the same image is skipped, so the
/// element that would have joined later is left out.
pub fn build_tracks(graph: &MatchGraph) -> Vec<Track> {
    let mut node_of: BTreeMap<(ImageId, u32), usize> = BTreeMap::new();
    let mut nodes: Vec<(ImageId, u32)> = Vec::new();
    let mut uf = UnionFind::new();
    // Per root: image -> keypoint held by the component.
    let mut images: Vec<BTreeMap<ImageId, u32>> = Vec::new();

    let mut node =
        |key: (ImageId, u32), uf: &mut UnionFind, images: &mut Vec<BTreeMap<ImageId, u32>>| {
            *node_of.entry(key).or_insert_with(|| {
                nodes.push(key);
                images.push(BTreeMap::from([(key.0, key.1)]));
                uf.push()
            })
        };

    for (&(a, b), matches) in &graph.pairs {
        for m in matches {
            let na = node((a, m.idx_a), &mut uf, &mut images);
            let nb = node((b, m.idx_b), &mut uf, &mut images);
            let (ra, rb) = (uf.find(na), uf.find(nb));
            if ra == rb {
                continue;
            }
            let conflict = {
                let (small, large) = if images[ra].len() <= images[rb].len() {
                    (&images[ra], &images[rb])
                } else {
                    (&images[rb], &images[ra])
                };
                small
                    .iter()
                    .any(|(img, kp)| large.get(img).is_some_and(|k| k != kp))
            };
            if conflict {
                continue;
            }
            let (root, child) = (ra.min(rb), ra.max(rb));
            uf.parent[child] = root;
            let moved = std::mem::take(&mut images[child]);
            images[root].extend(moved);
        }
    }

    let mut by_root: BTreeMap<usize, Vec<(ImageId, u32)>> = BTreeMap::new();
    for (i, &key) in nodes.iter().enumerate() {
        let r = uf.find(i);
        by_root.entry(r).or_default().push(key);
    }
    let mut tracks: Vec<Track> = by_root
        .into_values()
        .filter(|els| els.len() >= 2)
        .map(|mut elements| {
            elements.sort_unstable();
            Track {
                elements,
                status: TrackStatus::Untriangulated,
            }
        })
        .collect();
    tracks.sort_by(|a, b| a.elements.cmp(&b.elements));
    tracks
}

/// Counts from one triangulation pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangulationStats {
    pub accepted: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
    /// Elements dropped as outliers from otherwise accepted tracks.
    pub dropped_elements: usize,
}

/// A point estimate with the elements that support it.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustPoint {
    pub xyz: Vector3<f64>,
    pub elements: Vec<TrackElement>,
    pub mean_reproj_px: f64,
}

fn observation<'m>(
    model: &'m SparseModel,
    el: &TrackElement,
) -> Result<Observation<'m>, MappingError> {
    let image = model
        .images
        .get(&el.image_id)
        .ok_or(MappingError::UnposedImage(el.image_id))?;
    let camera = model
        .camera_of(el.image_id)
        .ok_or(MappingError::UnposedImage(el.image_id))?;
    let obs = image.observations.get(el.obs_index as usize).ok_or(
        MappingError::ObservationOutOfRange {
            image_id: el.image_id,
            index: el.obs_index,
        },
    )?;
    Ok(Observation {
        image_id: el.image_id,
        pose: &image.pose,
        camera: &camera.model,
        pixel: obs.xy,
    })
}

/// Reprojection error of `xyz` against one track element.
pub fn element_error(model: &SparseModel, el: &TrackElement, xyz: &Vector3<f64>) -> f64 {
    match observation(model, el) {
        Ok(o) => reprojection_error(o.camera, o.pose, xyz, &o.pixel),
        Err(_) => f64::INFINITY,
    }
}

/// Best pairwise ray angle of a point seen from the track's cameras.
pub fn track_angle_deg(model: &SparseModel, track: &[TrackElement], xyz: &Vector3<f64>) -> f64 {
    let centers: Vec<Vector3<f64>> = track
        .iter()
        .filter_map(|el| model.images.get(&el.image_id))
        .map(|im| im.pose.center())
        .collect();
    max_triangulation_angle_deg(&centers, xyz)
}

/// Triangulates `elements`, repeatedly dropping the element with the largest
/// reprojection error until every remaining one is within threshold.
pub fn triangulate_robust(
    model: &SparseModel,
    elements: &[TrackElement],
    th: &TriangulationThresholds,
) -> Result<Result<RobustPoint, RejectReason>, MappingError> {
    let mut obs: Vec<(TrackElement, Observation<'_>)> = elements
        .iter()
        .map(|el| observation(model, el).map(|o| (*el, o)))
        .collect::<Result<_, _>>()?;
    loop {
        if obs.len() < th.min_track_len {
            return Ok(Err(RejectReason::TooShort));
        }
        let list: Vec<Observation<'_>> = obs.iter().map(|(_, o)| *o).collect();
        let Ok(tri) = triangulate(&list) else {
            return Ok(Err(RejectReason::Degenerate));
        };
        let errors: Vec<f64> = list
            .iter()
            .map(|o| reprojection_error(o.camera, o.pose, &tri.point, &o.pixel))
            .collect();
        let (worst, worst_err) =
            errors
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &e)| {
                        if e > acc.1 {
                            (i, e)
                        } else {
                            acc
                        }
                    },
                );
        if worst_err > th.max_reproj_px || !worst_err.is_finite() {
            obs.remove(worst);
            continue;
        }
        if tri.tri_angle_deg < th.min_tri_angle_deg {
            return Ok(Err(RejectReason::SmallAngle));
        }
        return Ok(Ok(RobustPoint {
            xyz: tri.point,
            elements: obs.iter().map(|(el, _)| *el).collect(),
            mean_reproj_px: errors.iter().sum::<f64>() / errors.len() as f64,
        }));
    }
}

fn track_elements(track: &Track) -> Vec<TrackElement> {
    track
        .elements
        .iter()
        .map(|&(image_id, obs_index)| TrackElement {
            image_id,
            obs_index,
        })
        .collect()
}

/// Triangulates every untriangulated track and inserts accepted points with
/// fresh ids. Tracks are processed in parallel; ids follow track order.
pub fn triangulate_tracks(
    model: &mut SparseModel,
    tracks: &mut [Track],
    th: &TriangulationThresholds,
) -> Result<TriangulationStats, MappingError> {
    th.validate()?;
    for track in tracks.iter() {
        for el in track_elements(track) {
            observation(model, &el)?;
            let linked = model.images[&el.image_id].observations[el.obs_index as usize].point3d_id;
            if let Some(point) = linked {
                return Err(MappingError::ObservationInUse {
                    image_id: el.image_id,
                    index: el.obs_index,
                    point,
                });
            }
        }
    }

    let shared: &SparseModel = model;
    let results: Vec<Option<Result<RobustPoint, RejectReason>>> = tracks
        .par_iter()
        .map(|t| {
            if t.status != TrackStatus::Untriangulated {
                return Ok(None);
            }
            triangulate_robust(shared, &track_elements(t), th).map(Some)
        })
        .collect::<Result<_, MappingError>>()?;

    let mut stats = TriangulationStats::default();
    let mut next_id = model.next_point_id();
    for (track, result) in tracks.iter_mut().zip(results) {
        match result {
            None => {}
            Some(Err(reason)) => {
                track.status = TrackStatus::Rejected(reason);
                *stats.rejected.entry(reason).or_default() += 1;
            }
            Some(Ok(p)) => {
                stats.accepted += 1;
                stats.dropped_elements += track.elements.len() - p.elements.len();
                model.insert_point(Point3DRecord {
                    point3d_id: next_id,
                    xyz: p.xyz,
                    rgb: [128, 128, 128],
                    error: p.mean_reproj_px,
                    track: p.elements,
                });
                track.status = TrackStatus::Triangulated(next_id);
                next_id += 1;
            }
        }
    }
    Ok(stats)
}

fn linked_point(model: &SparseModel, image_id: ImageId, index: u32) -> Option<PointId> {
    model
        .images
        .get(&image_id)?
        .observations
        .get(index as usize)?
        .point3d_id
}

/// Mean reprojection error of a point over its track.
pub fn point_error(model: &SparseModel, point: &Point3DRecord) -> f64 {
    if point.track.is_empty() {
        return 0.0;
    }
    point
        .track
        .iter()
        .map(|el| element_error(model, el, &point.xyz))
        .sum::<f64>()
        / point.track.len() as f64
}

/// Merges pairs of points linked by a verified match whenever the united
/// track re-triangulates within every threshold, repeating until no merge
/// succeeds. Returns the number of merges.
pub fn merge_points(
    model: &mut SparseModel,
    graph: &MatchGraph,
    th: &TriangulationThresholds,
) -> Result<usize, MappingError> {
    th.validate()?;
    let mut merged = 0;
    let mut failed: BTreeSet<(PointId, PointId)> = BTreeSet::new();
    loop {
        let mut candidates = BTreeSet::new();
        for (&(a, b), matches) in &graph.pairs {
            for m in matches {
                let (Some(p), Some(q)) = (
                    linked_point(model, a, m.idx_a),
                    linked_point(model, b, m.idx_b),
                ) else {
                    continue;
                };
                if p != q {
                    candidates.insert((p.min(q), p.max(q)));
                }
            }
        }
        let mut progress = false;
        for (p, q) in candidates {
            if failed.contains(&(p, q)) {
                continue;
            }
            let (Some(pp), Some(pq)) = (model.points.get(&p), model.points.get(&q)) else {
                continue;
            };
            let images_p: BTreeSet<ImageId> = pp.track.iter().map(|e| e.image_id).collect();
            if pq.track.iter().any(|e| images_p.contains(&e.image_id)) {
                failed.insert((p, q));
                continue;
            }
            let mut united: Vec<TrackElement> = pp.track.iter().chain(&pq.track).copied().collect();
            united.sort_unstable();
            let accepted = match triangulate_robust(model, &united, th)? {
                Ok(rp) if rp.elements.len() == united.len() => Some(rp),
                _ => None,
            };
            let Some(rp) = accepted else {
                failed.insert((p, q));
                continue;
            };
            let id = model.next_point_id();
            let rgb = pp.rgb;
            model.remove_point(p);
            model.remove_point(q);
            model.insert_point(Point3DRecord {
                point3d_id: id,
                xyz: rp.xyz,
                rgb,
                error: rp.mean_reproj_px,
                track: rp.elements,
            });
            merged += 1;
            progress = true;
        }
        if !progress {
            return Ok(merged);
        }
    }
}

/// Adds match-linked keypoints to points that do not yet observe their image,
/// when the point reprojects within threshold. Repeats until nothing changes
/// and returns the number of observations added.
pub fn complete_points(
    model: &mut SparseModel,
    graph: &MatchGraph,
    th: &TriangulationThresholds,
) -> Result<usize, MappingError> {
    th.validate()?;
    let mut added = 0;
    loop {
        // (point, image) -> best (error, keypoint)
        let mut best: BTreeMap<(PointId, ImageId), (f64, u32)> = BTreeMap::new();
        for (&(a, b), matches) in &graph.pairs {
            for m in matches {
                for (src, src_idx, dst, dst_idx) in
                    [(a, m.idx_a, b, m.idx_b), (b, m.idx_b, a, m.idx_a)]
                {
                    let Some(p) = linked_point(model, src, src_idx) else {
                        continue;
                    };
                    let Some(image) = model.images.get(&dst) else {
                        continue;
                    };
                    let Some(obs) = image.observations.get(dst_idx as usize) else {
                        continue;
                    };
                    if obs.point3d_id.is_some() {
                        continue;
                    }
                    let point = &model.points[&p];
                    if point.track.iter().any(|e| e.image_id == dst) {
                        continue;
                    }
                    let el = TrackElement {
                        image_id: dst,
                        obs_index: dst_idx,
                    };
                    let err = element_error(model, &el, &point.xyz);
                    if err > th.max_reproj_px {
                        continue;
                    }
                    let entry = best.entry((p, dst)).or_insert((err, dst_idx));
                    if (err, dst_idx) < *entry {
                        *entry = (err, dst_idx);
                    }
                }
            }
        }
        let mut progress = false;
        for ((p, image_id), (_, idx)) in best {
            let image = model.images.get_mut(&image_id).expect("checked above");
            let obs = &mut image.observations[idx as usize];
            if obs.point3d_id.is_some() {
                continue;
            }
            obs.point3d_id = Some(p);
            let point = model.points.get_mut(&p).expect("linked point exists");
            point.track.push(TrackElement {
                image_id,
                obs_index: idx,
            });
            point.track.sort_unstable();
            added += 1;
            progress = true;
        }
        if !progress {
            break;
        }
    }
    let ids: Vec<PointId> = model.points.keys().copied().collect();
    for id in ids {
        let e = point_error(model, &model.points[&id]);
        model.points.get_mut(&id).expect("listed").error = e;
    }
    Ok(added)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub removed_observations: usize,
    pub removed_points: usize,
}

/// Drops observations beyond the reprojection threshold, then points left
/// with too few observations or too small a triangulation angle.
pub fn filter_points(
    model: &mut SparseModel,
    th: &TriangulationThresholds,
) -> Result<FilterStats, MappingError> {
    th.validate()?;
    let mut stats = FilterStats::default();
    let ids: Vec<PointId> = model.points.keys().copied().collect();
    for id in ids {
        let point = &model.points[&id];
        let (keep, drop): (Vec<TrackElement>, Vec<TrackElement>) = point
            .track
            .iter()
            .partition(|el| element_error(model, el, &point.xyz) <= th.max_reproj_px);
        let angle = track_angle_deg(model, &keep, &point.xyz);
        if keep.len() < th.min_track_len || angle < th.min_tri_angle_deg {
            let removed = model.remove_point(id).expect("listed");
            stats.removed_observations += removed.track.len();
            stats.removed_points += 1;
            continue;
        }
        if drop.is_empty() {
            continue;
        }
        for el in &drop {
            let image = model.images.get_mut(&el.image_id).expect("validated track");
            image.observations[el.obs_index as usize].point3d_id = None;
        }
        stats.removed_observations += drop.len();
        let point = model.points.get_mut(&id).expect("listed");
        point.track = keep;
        let e = point_error(model, &model.points[&id]);
        model.points.get_mut(&id).expect("listed").error = e;
    }
    Ok(stats)
}

/// Minimum inlier count for [`register_images`] to accept a pose.
pub const MIN_REGISTRATION_INLIERS: usize = 6;

/// Re-estimates the pose of every image without linked observations from
/// its matches to already linked keypoints, then links the inliers.
///
/// Returns the ids of the images that were registered.
pub fn register_images(
    model: &mut SparseModel,
    graph: &MatchGraph,
    th: &TriangulationThresholds,
) -> Result<Vec<ImageId>, MappingError> {
    th.validate()?;
    let lost: BTreeSet<ImageId> = model
        .images
        .values()
        .filter(|im| im.num_linked() == 0)
        .map(|im| im.image_id)
        .collect();
    if lost.is_empty() {
        return Ok(Vec::new());
    }
    // (image, keypoint) -> point -> votes
    let mut votes: BTreeMap<(ImageId, u32), BTreeMap<PointId, usize>> = BTreeMap::new();
    for (&(a, b), matches) in &graph.pairs {
        for m in matches {
            for (src, src_idx, dst, dst_idx) in [(a, m.idx_a, b, m.idx_b), (b, m.idx_b, a, m.idx_a)]
            {
                if !lost.contains(&dst) {
                    continue;
                }
                if let Some(p) = linked_point(model, src, src_idx) {
                    *votes
                        .entry((dst, dst_idx))
                        .or_default()
                        .entry(p)
                        .or_default() += 1;
                }
            }
        }
    }
    let mut registered = Vec::new();
    for image_id in lost {
        let image = &model.images[&image_id];
        let camera = &model.cameras[&image.camera_id].model;
        let mut keys = Vec::new();
        let mut corr = Vec::new();
        for (&(_, idx), points) in votes.range((image_id, 0)..=(image_id, u32::MAX)) {
            let Some(obs) = image.observations.get(idx as usize) else {
                continue;
            };
            let (&p, _) = points
                .iter()
                .max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0)))
                .expect("non-empty vote map");
            keys.push((idx, p));
            corr.push((model.points[&p].xyz, obs.xy));
        }
        if corr.len() < MIN_REGISTRATION_INLIERS {
            continue;
        }
        let wide = RobustLoss::Huber {
            delta_px: 4.0 * th.max_reproj_px.clamp(1.0, 1e6),
        };
        let (pose, _) = refine_pose(camera, &image.pose, &corr, wide, 50);
        let (pose, _) = refine_pose(camera, &pose, &corr, RobustLoss::default(), 50);

        // point -> (error, keypoint), one keypoint per point
        let mut best: BTreeMap<PointId, (f64, u32)> = BTreeMap::new();
        for (&(idx, p), (xyz, xy)) in keys.iter().zip(&corr) {
            let err = reprojection_error(camera, &pose, xyz, xy);
            if err <= th.max_reproj_px {
                let entry = best.entry(p).or_insert((err, idx));
                if (err, idx) < *entry {
                    *entry = (err, idx);
                }
            }
        }
        if best.len() < MIN_REGISTRATION_INLIERS {
            continue;
        }
        let image = model.images.get_mut(&image_id).expect("listed");
        image.pose = pose;
        for (&p, &(_, idx)) in &best {
            image.observations[idx as usize].point3d_id = Some(p);
        }
        for (&p, &(_, idx)) in &best {
            let point = model.points.get_mut(&p).expect("linked point exists");
            point.track.push(TrackElement {
                image_id,
                obs_index: idx,
            });
            point.track.sort_unstable();
        }
        registered.push(image_id);
    }
    let touched: BTreeSet<PointId> = registered
        .iter()
        .flat_map(|id| {
            model.images[id]
                .observations
                .iter()
                .filter_map(|o| o.point3d_id)
        })
        .collect();
    for id in touched {
        let e = point_error(model, &model.points[&id]);
        model.points.get_mut(&id).expect("listed").error = e;
    }
    Ok(registered)
}
