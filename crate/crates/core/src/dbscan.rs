//! Density-based false-positive rejection over retrieved tile positions.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::retrieval::RetrievalResult;

pub const NOISE: i32 = -1;
pub const DEFAULT_MIN_PTS: usize = 2;

/// `eps` default as a multiple of the tile spacing.
pub const DEFAULT_EPS_SPACING_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterLabeling {
    /// Per-point cluster id, or [`NOISE`].
    pub labels: Vec<i32>,
    pub n_clusters: usize,
    /// Members of the most populous cluster (lowest id on ties).
    pub largest_cluster_indices: Vec<usize>,
}

impl ClusterLabeling {
    pub fn members(&self, cluster: i32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }
}

/// DBSCAN with inclusive `eps` balls that count the point itself.
///
/// Points are visited in input order and clusters are expanded
/// breadth-first, so a border point reachable from several clusters joins
/// the first one to claim it.
pub fn dbscan(points: &[GeoPoint], eps: f64, min_pts: usize) -> Result<ClusterLabeling> {
    if !(eps > 0.0) {
        return Err(Error::param("eps must be positive"));
    }
    if min_pts == 0 {
        return Err(Error::param("min_pts must be at least 1"));
    }
    const UNSEEN: i32 = i32::MIN;
    let n = points.len();
    let region = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| points[i].distance(&points[j]) <= eps)
            .collect()
    };

    let mut labels = vec![UNSEEN; n];
    let mut cluster = 0i32;
    for i in 0..n {
        if labels[i] != UNSEEN {
            continue;
        }
        let seeds = region(i);
        if seeds.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        let mut queue: VecDeque<usize> = seeds.into_iter().filter(|&j| j != i).collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = cluster;
                continue;
            }
            if labels[j] != UNSEEN {
                continue;
            }
            labels[j] = cluster;
            let nj = region(j);
            if nj.len() >= min_pts {
                queue.extend(nj.into_iter().filter(|&k| labels[k] == UNSEEN || labels[k] == NOISE));
            }
        }
        cluster += 1;
    }

    let n_clusters = cluster as usize;
    let mut labeling = ClusterLabeling {
        labels,
        n_clusters,
        largest_cluster_indices: Vec::new(),
    };
    let sizes = labeling.cluster_sizes();
    if let Some(best) = (0..n_clusters).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))) {
        labeling.largest_cluster_indices = labeling.members(best as i32);
    }
    Ok(labeling)
}

/// Outcome of filtering one query's retrievals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilteredObservation {
    pub labeling: ClusterLabeling,
    /// Cluster chosen as the inlier set, if any survived.
    pub chosen_cluster: Option<i32>,
    pub observation: Option<GeoPoint>,
}

/// Centroid of the largest DBSCAN cluster among the match positions.
///
/// Size ties go to the higher summed similarity, then the lower id.
/// Returns `None` when every match is noise.
pub fn robust_observation(result: &RetrievalResult, eps: f64, min_pts: usize) -> Option<GeoPoint> {
    filter_matches(result, eps, min_pts)
        .ok()
        .and_then(|f| f.observation)
}

pub fn filter_matches(result: &RetrievalResult, eps: f64, min_pts: usize) -> Result<FilteredObservation> {
    let positions = result.positions();
    let labeling = dbscan(&positions, eps, min_pts)?;
    let sizes = labeling.cluster_sizes();
    let mut sim_sums = vec![0.0; labeling.n_clusters];
    for (m, &l) in result.matches.iter().zip(&labeling.labels) {
        if l >= 0 {
            sim_sums[l as usize] += m.similarity;
        }
    }
    let chosen = (0..labeling.n_clusters).max_by(|&a, &b| {
        sizes[a]
            .cmp(&sizes[b])
            .then(sim_sums[a].total_cmp(&sim_sums[b]))
            .then(b.cmp(&a))
    });
    let observation = chosen.and_then(|c| {
        GeoPoint::centroid(
            labeling
                .labels
                .iter()
                .zip(&positions)
                .filter(|(l, _)| **l == c as i32)
                .map(|(_, p)| p),
        )
    });
    Ok(FilteredObservation {
        labeling,
        chosen_cluster: chosen.map(|c| c as i32),
        observation,
    })
}

/// Mean of all match positions, with no outlier rejection.
pub fn unfiltered_observation(result: &RetrievalResult) -> Option<GeoPoint> {
    GeoPoint::centroid(result.matches.iter().map(|m| &m.position))
}

#[derive(Serialize)]
struct LabelingDump<'a> {
    query_id: &'a str,
    tile_ids: Vec<u32>,
    labels: &'a [i32],
    chosen_cluster: Option<i32>,
    observation: Option<GeoPoint>,
}

/// Append one JSON line describing a filtered query.
pub fn write_labeling_jsonl(
    mut w: impl Write,
    result: &RetrievalResult,
    filtered: &FilteredObservation,
) -> Result<()> {
    let dump = LabelingDump {
        query_id: &result.query_id,
        tile_ids: result.tile_ids(),
        labels: &filtered.labeling.labels,
        chosen_cluster: filtered.chosen_cluster,
        observation: filtered.observation,
    };
    let mut line = serde_json::to_vec(&dump).map_err(|e| Error::format(e.to_string()))?;
    line.push(b'\n');
    w.write_all(&line)?;
    Ok(())
}
