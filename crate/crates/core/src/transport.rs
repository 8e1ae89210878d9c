//! Feature affinities, Sinkhorn normalization with a slack row and column,
//! and soft correspondences extracted from the resulting assignment.
//!
//! The slack row and column are never normalized themselves. They soak up
//! the mass of points that have no counterpart in the other cloud, so that a
//! real row or column dominated by its slack entry ends up with little weight
//! on real correspondences.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{feature_distance, FeatureMatrix, Point3, PointCloud};

/// Smallest divisor used when normalizing rows and columns.
pub const NORMALIZATION_FLOOR: f64 = 1e-30;

/// `values[i][j] = exp(−‖f_i − g_j‖ / τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    values: DMatrix<f64>,
    tau: f64,
}

impl AffinityMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// `(N+1) × (M+1)` assignment; the last row and column are slack.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    values: DMatrix<f64>,
}

impl AssignmentMatrix {
    /// Wraps a full matrix whose last row and column are slack.
    pub fn from_padded(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 2 {
            return Err(Error::param("assignment", "needs at least one real row and column"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param("assignment", "entries must be finite and nonnegative"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Number of real (non-slack) rows.
    pub fn n_rows(&self) -> usize {
        self.values.nrows() - 1
    }

    /// Number of real (non-slack) columns.
    pub fn n_cols(&self) -> usize {
        self.values.ncols() - 1
    }

    /// Sum of row `i` over all `M+1` columns.
    pub fn row_sum(&self, i: usize) -> f64 {
        self.values.row(i).sum()
    }

    /// Sum of column `j` over all `N+1` rows.
    pub fn col_sum(&self, j: usize) -> f64 {
        self.values.column(j).sum()
    }

    /// Sum of row `i` over the real columns only.
    pub fn real_row_mass(&self, i: usize) -> f64 {
        self.values.row(i).columns(0, self.n_cols()).sum()
    }

    /// Sum of column `j` over the real rows only.
    pub fn real_col_mass(&self, j: usize) -> f64 {
        self.values.column(j).rows(0, self.n_rows()).sum()
    }
}

pub fn affinity(features_x: &FeatureMatrix, features_y: &FeatureMatrix, tau: f64) -> Result<AffinityMatrix> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if features_x.dim() != features_y.dim() {
        return Err(Error::FeatureDimension(features_x.dim(), features_y.dim()));
    }
    let n = features_x.len();
    let m = features_y.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let f = features_x.row(i);
            features_y
                .rows()
                .map(|g| (-feature_distance(f, g) / tau).exp())
                .collect()
        })
        .collect();
    let values = DMatrix::from_fn(n, m, |i, j| rows[i][j]);
    Ok(AffinityMatrix { values, tau })
}

/// Slack entry chosen to compete with a real match at feature distance `d0`.
pub fn slack_value(outlier_distance: f64, tau: f64) -> f64 {
    (-outlier_distance / tau).exp()
}

/// Pads `m` with a slack row and column filled with `slack_value`.
pub fn add_slack(m: &AffinityMatrix, slack_value: f64) -> Result<AssignmentMatrix> {
    if !(slack_value > 0.0 && slack_value.is_finite()) {
        return Err(Error::param("slack_value", "must be positive and finite"));
    }
    let (n, k) = m.values.shape();
    let mut values = DMatrix::from_element(n + 1, k + 1, slack_value);
    values.view_mut((0, 0), (n, k)).copy_from(&m.values);
    Ok(AssignmentMatrix { values })
}

/// Alternating row/column normalization. Each iteration divides every real
/// row by its sum over all columns (slack included), then every real column
/// by its sum over all rows (slack included).
pub fn sinkhorn(m: &AssignmentMatrix, iterations: usize) -> Result<AssignmentMatrix> {
    if iterations == 0 {
        return Err(Error::param("iterations", "must be at least 1"));
    }
    let mut a = m.values.clone();
    let (rows, cols) = a.shape();
    let (n, k) = (rows - 1, cols - 1);
    for _ in 0..iterations {
        for i in 0..n {
            let s = a.row(i).sum();
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::DegenerateAffinity(format!("row {i} sums to {s}")));
            }
            a.row_mut(i).unscale_mut(s.max(NORMALIZATION_FLOOR));
        }
        for j in 0..k {
            let s = a.column(j).sum();
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::DegenerateAffinity(format!("column {j} sums to {s}")));
            }
            a.column_mut(j).unscale_mut(s.max(NORMALIZATION_FLOOR));
        }
    }
    Ok(AssignmentMatrix { values: a })
}

/// Barycentric correspondences `Σ_j a_ij·y_j / Σ_j a_ij` and weights
/// `Σ_j a_ij`, both over the real columns. A row with no real mass maps to
/// its own source point with weight zero.
pub fn soft_correspondences(
    a: &AssignmentMatrix,
    source: &[Point3],
    target: &[Point3],
) -> Result<(PointCloud, Vec<f64>)> {
    if source.len() != a.n_rows() {
        return Err(Error::LengthMismatch(source.len(), a.n_rows()));
    }
    if target.len() != a.n_cols() {
        return Err(Error::LengthMismatch(target.len(), a.n_cols()));
    }
    let mut points = Vec::with_capacity(source.len());
    let mut weights = Vec::with_capacity(source.len());
    for i in 0..a.n_rows() {
        let row = a.values.row(i);
        let mut mass = 0.0;
        let mut acc = nalgebra::Vector3::zeros();
        for (j, y) in target.iter().enumerate() {
            mass += row[j];
            acc += y.coords * row[j];
        }
        if mass > 0.0 {
            points.push(Point3::from(acc / mass));
        } else {
            points.push(source[i]);
        }
        weights.push(mass);
    }
    Ok((PointCloud::new(points)?, weights))
}
