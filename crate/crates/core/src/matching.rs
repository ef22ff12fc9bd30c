//! Mutual-nearest-neighbour descriptor matching and epipolar verification
//! against known poses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, Pose};
use crate::model_io::FeatureSet;
use crate::ImageId;

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("no features for image {0}")]
    MissingFeatures(ImageId),
    #[error("no pose or camera for image {0}")]
    MissingView(ImageId),
    #[error("match index {index} out of range for image {image_id} with {len} keypoints")]
    IndexOutOfRange {
        image_id: ImageId,
        index: u32,
        len: usize,
    },
    #[error("{path}: line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub idx_a: u32,
    pub idx_b: u32,
    pub distance: f64,
}

impl Match {
    pub fn swapped(self) -> Self {
        Self {
            idx_a: self.idx_b,
            idx_b: self.idx_a,
            distance: self.distance,
        }
    }
}

/// Matches per image pair, keyed `(a, b)` with `a < b`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchGraph {
    pub pairs: BTreeMap<(ImageId, ImageId), Vec<Match>>,
}

impl MatchGraph {
    pub fn num_matches(&self) -> usize {
        self.pairs.values().map(Vec::len).sum()
    }

    /// Inserts matches for `(a, b)`, swapping sides if `a > b`.
    pub fn insert(&mut self, a: ImageId, b: ImageId, matches: Vec<Match>) {
        if a < b {
            self.pairs.insert((a, b), matches);
        } else {
            let mut m: Vec<Match> = matches.into_iter().map(Match::swapped).collect();
            m.sort_by_key(|m| m.idx_a);
            self.pairs.insert((b, a), m);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchOptions {
    pub max_distance: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Nearest {
    best: f32,
    second: f32,
    index: u32,
}

impl Nearest {
    const NONE: Nearest = Nearest {
        best: f32::INFINITY,
        second: f32::INFINITY,
        index: u32::MAX,
    };

    // Candidates arrive in increasing index order, so `<` keeps the smaller index on ties.
    fn offer(&mut self, d: f32, index: u32) {
        if d < self.best {
            self.second = self.best;
            self.best = d;
            self.index = index;
        } else if d < self.second {
            self.second = d;
        }
    }

    fn merge_later(&mut self, other: &Nearest) {
        if other.best < self.best {
            self.second = self.best.min(other.second);
            self.best = other.best;
            self.index = other.index;
        } else {
            self.second = self.second.min(other.best);
        }
    }
}

// Eight independent partial sums so the loop vectorizes.
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let mut acc = [0.0f32; 8];
    for (x, y) in ca.zip(cb) {
        let (x, y): (&[f32; 8], &[f32; 8]) = (x.try_into().unwrap(), y.try_into().unwrap());
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn passes_ratio(n: &Nearest, ratio: Option<f64>) -> bool {
    match ratio {
        None => true,
        Some(r) if n.second.is_infinite() => r >= 0.0,
        Some(r) => (n.best as f64).sqrt() <= r * (n.second as f64).sqrt(),
    }
}

const ROW_BLOCK: usize = 64;

/// Mutual nearest neighbours under L2 descriptor distance, sorted by `idx_a`.
///
/// The ratio filter, when enabled, is applied on both sides so that the
/// result does not depend on argument order.
pub fn match_mnn(
    a: &FeatureSet,
    b: &FeatureSet,
    opts: &MatchOptions,
) -> Result<Vec<Match>, MatchingError> {
    if a.is_empty() || b.is_empty() {
        return Ok(Vec::new());
    }
    if a.dim != b.dim {
        return Err(MatchingError::DimMismatch(a.dim, b.dim));
    }
    let (na, nb) = (a.len(), b.len());

    let blocks: Vec<(Vec<Nearest>, Vec<Nearest>)> = (0..na.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|blk| {
            let rows = blk * ROW_BLOCK..((blk + 1) * ROW_BLOCK).min(na);
            let mut row_best = Vec::with_capacity(rows.len());
            let mut col_best = vec![Nearest::NONE; nb];
            for i in rows {
                let da = a.descriptor(i);
                let mut nearest = Nearest::NONE;
                for (j, col) in col_best.iter_mut().enumerate() {
                    let d = sq_dist(da, b.descriptor(j));
                    nearest.offer(d, j as u32);
                    col.offer(d, i as u32);
                }
                row_best.push(nearest);
            }
            (row_best, col_best)
        })
        .collect();

    let mut row_best = Vec::with_capacity(na);
    let mut col_best = vec![Nearest::NONE; nb];
    for (rows, cols) in blocks {
        row_best.extend(rows);
        for (c, other) in col_best.iter_mut().zip(&cols) {
            c.merge_later(other);
        }
    }

    let mut out = Vec::new();
    for (i, n) in row_best.iter().enumerate() {
        let j = n.index as usize;
        if col_best[j].index as usize != i {
            continue;
        }
        let distance = (n.best as f64).sqrt();
        if opts.max_distance.is_some_and(|m| distance > m) {
            continue;
        }
        if !passes_ratio(n, opts.ratio) || !passes_ratio(&col_best[j], opts.ratio) {
            continue;
        }
        out.push(Match {
            idx_a: i as u32,
            idx_b: j as u32,
            distance,
        });
    }
    Ok(out)
}

/// Runs [`match_mnn`] for every pair in parallel.
pub fn match_pairs(
    pairs: &[(ImageId, ImageId)],
    features: &BTreeMap<ImageId, &FeatureSet>,
    opts: &MatchOptions,
) -> Result<MatchGraph, MatchingError> {
    let results: Vec<_> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let fa = features.get(&a).ok_or(MatchingError::MissingFeatures(a))?;
            let fb = features.get(&b).ok_or(MatchingError::MissingFeatures(b))?;
            Ok(((a, b), match_mnn(fa, fb, opts)?))
        })
        .collect::<Result<_, MatchingError>>()?;
    let mut graph = MatchGraph::default();
    for ((a, b), m) in results {
        graph.insert(a, b, m);
    }
    Ok(graph)
}

/// A calibrated, posed image with its keypoints.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub pose: &'a Pose,
    pub camera: &'a CameraModel,
    pub keypoints: &'a [Vector2<f64>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub inliers: Vec<Match>,
    pub inlier_ratio: f64,
    /// Set when the baseline is zero and every match was passed through.
    pub skipped: bool,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Essential matrix `[t_ab]x R_ab` mapping rays of `a` to epipolar lines in `b`,
/// or `None` for a zero baseline.
pub fn essential_matrix(pose_a: &Pose, pose_b: &Pose) -> Option<Matrix3<f64>> {
    let ra = pose_a.rotation_matrix();
    let rb = pose_b.rotation_matrix();
    let r_ab = rb * ra.transpose();
    let t_ab = pose_b.translation() - r_ab * pose_a.translation();
    let scale = 1f64.max(pose_a.center().norm()).max(pose_b.center().norm());
    if t_ab.norm() < 1e-12 * scale {
        return None;
    }
    Some(skew(&t_ab) * r_ab)
}

/// Sampson distance of a normalized-coordinate correspondence.
pub fn sampson_distance(e: &Matrix3<f64>, xa: &Vector2<f64>, xb: &Vector2<f64>) -> f64 {
    let a = Vector3::new(xa.x, xa.y, 1.0);
    let b = Vector3::new(xb.x, xb.y, 1.0);
    let ea = e * a;
    let etb = e.transpose() * b;
    let num = b.dot(&ea);
    let den = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if den <= 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num.abs() / den.sqrt()
}

/// Keeps matches whose Sampson distance, converted to pixels with the
/// geometric mean of the two focal lengths, is below `threshold_px`.
pub fn verify_epipolar(
    matches: &[Match],
    view_a: &View<'_>,
    view_b: &View<'_>,
    threshold_px: f64,
) -> Verification {
    let Some(e) = essential_matrix(view_a.pose, view_b.pose) else {
        log::warn!("zero baseline between views, epipolar verification skipped");
        return Verification {
            inliers: matches.to_vec(),
            inlier_ratio: if matches.is_empty() { 0.0 } else { 1.0 },
            skipped: true,
        };
    };
    let scale = (view_a.camera.mean_focal() * view_b.camera.mean_focal()).sqrt();
    let inliers: Vec<Match> = matches
        .iter()
        .filter(|m| {
            let xa = view_a
                .camera
                .pixel_to_normalized(&view_a.keypoints[m.idx_a as usize]);
            let xb = view_b
                .camera
                .pixel_to_normalized(&view_b.keypoints[m.idx_b as usize]);
            sampson_distance(&e, &xa, &xb) * scale < threshold_px
        })
        .copied()
        .collect();
    let inlier_ratio = if matches.is_empty() {
        0.0
    } else {
        inliers.len() as f64 / matches.len() as f64
    };
    Verification {
        inliers,
        inlier_ratio,
        skipped: false,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VerifyStats {
    pub input_matches: usize,
    pub inlier_matches: usize,
    pub skipped_pairs: usize,
}

/// Verifies every pair of a graph in parallel.
pub fn verify_graph(
    graph: &MatchGraph,
    views: &BTreeMap<ImageId, View<'_>>,
    threshold_px: f64,
) -> Result<(MatchGraph, VerifyStats), MatchingError> {
    let results: Vec<_> = graph
        .pairs
        .par_iter()
        .map(|(&(a, b), matches)| {
            let va = views.get(&a).ok_or(MatchingError::MissingView(a))?;
            let vb = views.get(&b).ok_or(MatchingError::MissingView(b))?;
            for m in matches {
                check_index(a, m.idx_a, va.keypoints.len())?;
                check_index(b, m.idx_b, vb.keypoints.len())?;
            }
            Ok((
                (a, b),
                matches.len(),
                verify_epipolar(matches, va, vb, threshold_px),
            ))
        })
        .collect::<Result<_, MatchingError>>()?;
    let mut out = MatchGraph::default();
    let mut stats = VerifyStats::default();
    for (key, n, v) in results {
        stats.input_matches += n;
        stats.inlier_matches += v.inliers.len();
        stats.skipped_pairs += v.skipped as usize;
        out.pairs.insert(key, v.inliers);
    }
    Ok((out, stats))
}

fn check_index(image_id: ImageId, index: u32, len: usize) -> Result<(), MatchingError> {
    if (index as usize) < len {
        Ok(())
    } else {
        Err(MatchingError::IndexOutOfRange {
            image_id,
            index,
            len,
        })
    }
}

/// Writes `name_a name_b` blocks of `idx_a idx_b` lines, blank-line separated.
pub fn write_match_dump(
    path: &Path,
    graph: &MatchGraph,
    names: &BTreeMap<ImageId, String>,
) -> Result<(), MatchingError> {
    let mut s = String::new();
    for (i, (&(a, b), matches)) in graph.pairs.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let name = |id: ImageId| names.get(&id).ok_or(MatchingError::MissingView(id));
        writeln!(s, "{} {}", name(a)?, name(b)?).unwrap();
        for m in matches {
            writeln!(s, "{} {}", m.idx_a, m.idx_b).unwrap();
        }
    }
    std::fs::write(path, s).map_err(|source| MatchingError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a match dump. Distances are not stored and come back as zero.
pub fn read_match_dump(
    path: &Path,
    ids: &BTreeMap<String, ImageId>,
) -> Result<MatchGraph, MatchingError> {
    let text = std::fs::read_to_string(path).map_err(|source| MatchingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let err = |line: usize, detail: String| MatchingError::Parse {
        path: path.display().to_string(),
        line,
        detail,
    };
    let mut graph = MatchGraph::default();
    let mut current: Option<(ImageId, ImageId, Vec<Match>)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            if let Some((a, b, m)) = current.take() {
                graph.insert(a, b, m);
            }
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(err(
                line,
                format!("expected 2 fields, got {}", fields.len()),
            ));
        }
        match &mut current {
            None => {
                let id = |n: &str| {
                    ids.get(n)
                        .copied()
                        .ok_or_else(|| err(line, format!("unknown image '{n}'")))
                };
                let (a, b) = (id(fields[0])?, id(fields[1])?);
                if a == b {
                    return Err(err(line, "pair of an image with itself".into()));
                }
                current = Some((a, b, Vec::new()));
            }
            Some((_, _, m)) => {
                let idx = |s: &str| {
                    s.parse::<u32>()
                        .map_err(|_| err(line, format!("bad keypoint index '{s}'")))
                };
                m.push(Match {
                    idx_a: idx(fields[0])?,
                    idx_b: idx(fields[1])?,
                    distance: 0.0,
                });
            }
        }
    }
    if let Some((a, b, m)) = current.take() {
        graph.insert(a, b, m);
    }
    Ok(graph)
}
