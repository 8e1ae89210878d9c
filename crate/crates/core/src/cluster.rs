//! DBSCAN decomposition of foreground points into rigid-body candidates.

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::spatial::SpatialHash;

pub const NOISE: i32 = -1;

/// Per-point cluster ids (`-1` for noise) and the size of each cluster.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClusterLabeling {
    labels: Vec<i32>,
    sizes: Vec<usize>,
}

impl ClusterLabeling {
    /// Builds a labeling from raw ids, which must be `-1` or `0..K` with every
    /// id in `0..K` used at least once.
    pub fn from_labels(labels: Vec<i32>) -> Result<Self> {
        let k = labels.iter().copied().max().unwrap_or(NOISE).max(NOISE) + 1;
        let mut sizes = vec![0usize; k as usize];
        for &l in &labels {
            if l < NOISE {
                return Err(Error::param("labels", format!("invalid cluster id {l}")));
            }
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        if sizes.contains(&0) {
            return Err(Error::param("labels", "cluster ids must be contiguous"));
        }
        Ok(Self { labels, sizes })
    }

    /// Labels whose clusters may have lost every member, e.g. after lifting
    /// a voxel labeling onto a subset of points.
    pub(crate) fn from_labels_unchecked(labels: Vec<i32>, num_clusters: usize) -> Self {
        let mut sizes = vec![0usize; num_clusters];
        for &l in labels.iter().filter(|&&l| l >= 0) {
            sizes[l as usize] += 1;
        }
        Self { labels, sizes }
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Point indices of cluster `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k as i32)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// Lifts a labeling over a subset of points onto the full index range;
    /// points outside the subset are labeled noise.
    pub fn scatter(&self, subset: &[usize], total: usize) -> Self {
        let mut labels = vec![NOISE; total];
        for (&i, &l) in subset.iter().zip(&self.labels) {
            labels[i] = l;
        }
        Self {
            labels,
            sizes: self.sizes.clone(),
        }
    }
}

/// DBSCAN with Euclidean neighborhoods of radius `eps` (inclusive, a point
/// counting as its own neighbor). Cluster ids follow the index of each
/// cluster's first core point; a border point joins the cluster of its
/// lowest-indexed core neighbor. Clusters smaller than `min_cluster_size`
/// are relabeled as noise.
pub fn dbscan(points: &[Point3], eps: f64, min_samples: usize, min_cluster_size: usize) -> Result<ClusterLabeling> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::param("eps", "must be positive"));
    }
    if min_samples == 0 {
        return Err(Error::param("min_samples", "must be at least 1"));
    }
    let n = points.len();
    if n == 0 {
        return Ok(ClusterLabeling::default());
    }

    let index = SpatialHash::new(points, eps);
    let neighbors: Vec<Vec<usize>> = points.iter().map(|p| index.within(p, eps)).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut raw = vec![NOISE; n];
    let mut next = 0i32;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || raw[seed] != NOISE {
            continue;
        }
        raw[seed] = next;
        stack.push(seed);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && raw[q] == NOISE {
                    raw[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            // Neighbor lists are sorted, so the first core hit is the lowest index.
            if let Some(&c) = neighbors[i].iter().find(|&&q| core[q]) {
                raw[i] = raw[c];
            }
        }
    }

    let mut sizes = vec![0usize; next as usize];
    for &l in &raw {
        if l >= 0 {
            sizes[l as usize] += 1;
        }
    }
    let mut remap = vec![NOISE; next as usize];
    let mut kept = Vec::new();
    for (k, &s) in sizes.iter().enumerate() {
        if s >= min_cluster_size {
            remap[k] = kept.len() as i32;
            kept.push(s);
        }
    }
    let labels = raw
        .into_iter()
        .map(|l| if l >= 0 { remap[l as usize] } else { NOISE })
        .collect();
    Ok(ClusterLabeling { labels, sizes: kept })
}
