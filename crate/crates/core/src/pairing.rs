//! Pose-guided image pair selection.
//!
//! Each image is paired with its `k` nearest neighbours by camera-center
//! distance, keeping only pairs whose optical axes differ by less than a
//! maximum angle.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{viewing_ray_angle_deg, Pose};
use crate::ImageId;

#[derive(Debug, Error, PartialEq)]
pub enum PairingError {
    #[error("pair selection needs at least 2 posed images, got {0}")]
    TooFewImages(usize),
    #[error("image {0} has a non-finite pose")]
    NonFinitePose(ImageId),
}

/// How the per-image neighbour lists are combined into pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborRelation {
    /// `(i, j)` qualifies if either image lists the other.
    #[default]
    Union,
    /// Both images must list each other.
    Mutual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairingOptions {
    pub k_nearest: usize,
    pub max_ray_angle_deg: f64,
    pub relation: NeighborRelation,
}

impl Default for PairingOptions {
    fn default() -> Self {
        Self {
            k_nearest: 50,
            max_ray_angle_deg: 60.0,
            relation: NeighborRelation::Union,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairList {
    /// Sorted, `a < b`, no duplicates.
    pub pairs: Vec<(ImageId, ImageId)>,
    pub k_nearest: usize,
    pub max_ray_angle_deg: f64,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of connected components of the pair graph over `images`.
    pub fn num_components(&self, images: impl IntoIterator<Item = ImageId>) -> usize {
        let ids: Vec<ImageId> = images.into_iter().collect();
        let index: BTreeMap<ImageId, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut parent: Vec<usize> = (0..ids.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(a, b) in &self.pairs {
            let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
                continue;
            };
            let (ra, rb) = (find(&mut parent, ia), find(&mut parent, ib));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        (0..ids.len())
            .filter(|&i| find(&mut parent, i) == i)
            .count()
    }
}

/// The `k` images closest to each image, ties broken by the smaller id.
fn nearest_neighbors(ids: &[ImageId], centers: &[Vector3<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..ids.len())
        .into_par_iter()
        .map(|i| {
            let mut others: Vec<(f64, ImageId, usize)> = (0..ids.len())
                .filter(|&j| j != i)
                .map(|j| ((centers[i] - centers[j]).norm_squared(), ids[j], j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.truncate(k);
            others.into_iter().map(|(_, _, j)| j).collect()
        })
        .collect()
}

pub fn select_pairs(
    poses: &BTreeMap<ImageId, Pose>,
    opts: &PairingOptions,
) -> Result<PairList, PairingError> {
    if poses.len() < 2 {
        return Err(PairingError::TooFewImages(poses.len()));
    }
    let ids: Vec<ImageId> = poses.keys().copied().collect();
    let pose_list: Vec<&Pose> = poses.values().collect();
    let centers: Vec<Vector3<f64>> = pose_list.iter().map(|p| p.center()).collect();
    for (id, c) in ids.iter().zip(&centers) {
        if !c.iter().all(|v| v.is_finite()) {
            return Err(PairingError::NonFinitePose(*id));
        }
    }

    let neighbors = nearest_neighbors(&ids, &centers, opts.k_nearest);
    let listed: Vec<BTreeSet<usize>> = neighbors
        .iter()
        .map(|n| n.iter().copied().collect())
        .collect();

    let mut pairs = BTreeSet::new();
    for (i, cands) in neighbors.iter().enumerate() {
        for &j in cands {
            let keep = match opts.relation {
                NeighborRelation::Union => true,
                NeighborRelation::Mutual => listed[j].contains(&i),
            };
            if !keep {
                continue;
            }
            if viewing_ray_angle_deg(pose_list[i], pose_list[j]) < opts.max_ray_angle_deg {
                let (a, b) = (ids[i].min(ids[j]), ids[i].max(ids[j]));
                pairs.insert((a, b));
            }
        }
    }
    Ok(PairList {
        pairs: pairs.into_iter().collect(),
        k_nearest: opts.k_nearest,
        max_ray_angle_deg: opts.max_ray_angle_deg,
    })
}
