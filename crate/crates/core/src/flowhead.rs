//! Feature-space soft correspondences and the initial (unconstrained) flow.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{feature_distance, FeatureMatrix, PointCloud, Vector3};
use crate::spatial::SpatialHash;

/// Per-point 3D displacements of a source cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowField {
    vectors: Vec<Vector3>,
}

impl FlowField {
    pub fn new(vectors: Vec<Vector3>) -> Result<Self> {
        if let Some(i) = vectors.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vector3] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<Vector3> {
        self.vectors
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            vectors: indices.iter().map(|&i| self.vectors[i]).collect(),
        }
    }
}

/// Soft flow together with each source point's smallest feature distance,
/// a measure of how well it is matched at all.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftFlow {
    pub flow: FlowField,
    pub best_feature_distance: Vec<f64>,
}

fn features_of<'a>(pc: &'a PointCloud, name: &'static str) -> Result<&'a FeatureMatrix> {
    pc.features().ok_or(Error::MissingAttribute(name))
}

/// Initial flow `Σ_j d_ij·y_j − x_i` with `d_i = softmax_j(−‖f_i − g_j‖/τ)`.
pub fn soft_flow(x: &PointCloud, y: &PointCloud, tau_flow: f64) -> Result<FlowField> {
    soft_flow_detailed(x, y, tau_flow).map(|s| s.flow)
}

pub fn soft_flow_detailed(x: &PointCloud, y: &PointCloud, tau_flow: f64) -> Result<SoftFlow> {
    if !(tau_flow > 0.0) {
        return Err(Error::NonPositiveTemperature(tau_flow));
    }
    let fx = features_of(x, "features")?;
    let fy = features_of(y, "features")?;
    if fx.dim() != fy.dim() {
        return Err(Error::FeatureDimension(fx.dim(), fy.dim()));
    }
    if y.is_empty() {
        return Err(Error::EmptyCloud);
    }

    let rows: Vec<(Vector3, f64)> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let fi = fx.row(i);
            let dist: Vec<f64> = fy.rows().map(|g| feature_distance(fi, g)).collect();
            let best = dist.iter().copied().fold(f64::INFINITY, f64::min);
            // Shifting by the row minimum keeps the largest exponent at zero.
            let mut sum = 0.0;
            let mut acc = Vector3::zeros();
            for (d, yj) in dist.iter().zip(y.points()) {
                let e = (-(d - best) / tau_flow).exp();
                sum += e;
                acc += yj.coords * e;
            }
            (acc / sum - x.points()[i].coords, best)
        })
        .collect();

    let (vectors, best_feature_distance) = rows.into_iter().unzip();
    Ok(SoftFlow {
        flow: FlowField::new(vectors)?,
        best_feature_distance,
    })
}

/// Non-learned local smoothing: each vector is replaced by the mean over its
/// `k` nearest neighbors that lie within `radius` (itself included).
pub fn smooth_flow(points: &PointCloud, flow: &FlowField, k: usize, radius: f64) -> Result<FlowField> {
    if flow.len() != points.len() {
        return Err(Error::LengthMismatch(flow.len(), points.len()));
    }
    if k == 0 || !(radius > 0.0) {
        return Err(Error::param("smoothing", "k and radius must be positive"));
    }
    let index = SpatialHash::new(points.points(), radius);
    let vectors = points
        .points()
        .iter()
        .map(|p| {
            let mut near: Vec<(usize, f64)> = Vec::new();
            index.for_each_within(p, radius, |j, d2| near.push((j, d2)));
            near.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            near.truncate(k);
            let sum: Vector3 = near.iter().map(|&(j, _)| flow.vectors()[j]).sum();
            sum / near.len() as f64
        })
        .collect();
    FlowField::new(vectors)
}
