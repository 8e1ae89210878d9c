//! Point clouds, rigid transforms and voxelization.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix4, Unit};
use rand::Rng;

use crate::error::{Error, Result};
use crate::flowhead::FlowField;
use crate::spatial::{cell_key, CellKey, SpatialHash};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;

/// Tolerance on `RᵀR = I` and `det R = 1` accepted by [`RigidTransform::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Row-major `N × D` matrix of per-point feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "feature dimension must be at least 1"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::param(
                "data",
                format!("{} values do not split into rows of {dim}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i / dim));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::FeatureDimension(dim, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            data,
        }
    }
}

/// Euclidean distance between two feature rows.
pub(crate) fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Ordered 3D points with optional parallel per-point attributes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
    features: Option<FeatureMatrix>,
    fg_prob: Option<Vec<f64>>,
    cluster_id: Option<Vec<i32>>,
    flow: Option<Vec<Vector3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            points,
            ..Default::default()
        })
    }

    pub(crate) fn from_points_unchecked(points: Vec<Point3>) -> Self {
        Self {
            points,
            ..Default::default()
        }
    }

    pub fn with_features(mut self, features: FeatureMatrix) -> Result<Self> {
        self.check_len("features", features.len())?;
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_fg_prob(mut self, fg_prob: Vec<f64>) -> Result<Self> {
        self.check_len("fg_prob", fg_prob.len())?;
        if let Some(i) = fg_prob.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::param(
                "fg_prob",
                format!("probability {} at index {i} outside [0, 1]", fg_prob[i]),
            ));
        }
        self.fg_prob = Some(fg_prob);
        Ok(self)
    }

    pub fn with_cluster_ids(mut self, ids: Vec<i32>) -> Result<Self> {
        self.check_len("cluster_id", ids.len())?;
        self.cluster_id = Some(ids);
        Ok(self)
    }

    pub fn with_flow(mut self, flow: Vec<Vector3>) -> Result<Self> {
        self.check_len("flow", flow.len())?;
        if let Some(i) = flow.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        self.flow = Some(flow);
        Ok(self)
    }

    fn check_len(&self, name: &'static str, got: usize) -> Result<()> {
        if got != self.points.len() {
            return Err(Error::AttributeLength {
                name,
                expected: self.points.len(),
                got,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn features(&self) -> Option<&FeatureMatrix> {
        self.features.as_ref()
    }

    pub fn fg_prob(&self) -> Option<&[f64]> {
        self.fg_prob.as_deref()
    }

    pub fn cluster_ids(&self) -> Option<&[i32]> {
        self.cluster_id.as_deref()
    }

    pub fn flow(&self) -> Option<&[Vector3]> {
        self.flow.as_deref()
    }

    pub fn take_features(&mut self) -> Option<FeatureMatrix> {
        self.features.take()
    }

    pub fn clear_flow(&mut self) {
        self.flow = None;
    }

    /// Subset of the cloud (all attributes) in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect();
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            features: self.features.as_ref().map(|f| f.select(indices)),
            fg_prob: self.fg_prob.as_ref().map(pick),
            cluster_id: self
                .cluster_id
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            flow: self
                .flow
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i]).collect()),
        }
    }
}

/// An element of SE(3): `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let ortho = rotation.transpose() * rotation - Matrix3::identity();
        let worst = ortho.amax();
        if worst > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {worst:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation determinant is {det}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` followed by `translation`.
    pub fn from_axis_angle(axis: &Vector3, angle: f64, translation: Vector3) -> Self {
        let rotation = if axis.norm() > 0.0 {
            *nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
        } else {
            Matrix3::identity()
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3 {
        &self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Displacement `T∘p − p`.
    pub fn flow_at(&self, p: &Point3) -> Vector3 {
        self.transform_point(p) - p
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        crate::metrics::rotation_angle(&self.rotation)
    }
}

/// Applies `t` to every point; attributes (flow included) are carried through unchanged.
pub fn apply_transform(t: &RigidTransform, pc: &PointCloud) -> PointCloud {
    let mut out = pc.clone();
    for p in &mut out.points {
        *p = t.transform_point(p);
    }
    out
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Sparse voxelization of a cloud, keeping the point-to-voxel bookkeeping
/// needed to move per-voxel quantities back onto the original points.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    voxel_size: f64,
    centers: PointCloud,
    point_to_voxel: Vec<Option<usize>>,
    members: Vec<Vec<usize>>,
}

impl VoxelGrid {
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Voxel centers (centroids of their members) with averaged attributes.
    pub fn centers(&self) -> &PointCloud {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Voxel index of each original point; `None` when its voxel was not retained.
    pub fn point_to_voxel(&self) -> &[Option<usize>] {
        &self.point_to_voxel
    }

    /// Original point indices contributing to each voxel.
    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }
}

/// Groups points into cubic cells of `voxel_size`. Voxel order follows the
/// first point falling in each cell. If more than `max_voxels` cells are
/// occupied, a uniform random subset of `max_voxels` cells is kept.
pub fn voxelize<R: Rng + ?Sized>(
    pc: &PointCloud,
    voxel_size: f64,
    max_voxels: usize,
    rng: &mut R,
) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::param("voxel_size", "must be positive"));
    }
    if max_voxels == 0 {
        return Err(Error::param("max_voxels", "must be at least 1"));
    }
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }

    let mut slot: HashMap<CellKey, usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, p) in pc.points().iter().enumerate() {
        let key = cell_key(p, voxel_size);
        let v = *slot.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[v].push(i);
    }

    if members.len() > max_voxels {
        let mut keep = rand::seq::index::sample(rng, members.len(), max_voxels).into_vec();
        keep.sort_unstable();
        members = keep.into_iter().map(|v| std::mem::take(&mut members[v])).collect();
    }

    let mut point_to_voxel = vec![None; pc.len()];
    let mut centers = Vec::with_capacity(members.len());
    for (v, m) in members.iter().enumerate() {
        let mut sum = Vector3::zeros();
        for &i in m {
            point_to_voxel[i] = Some(v);
            sum += pc.points()[i].coords;
        }
        centers.push(Point3::from(sum / m.len() as f64));
    }

    let mut cloud = PointCloud::from_points_unchecked(centers);
    if let Some(f) = pc.features() {
        let dim = f.dim();
        let mut data = vec![0.0; members.len() * dim];
        for (v, m) in members.iter().enumerate() {
            let row = &mut data[v * dim..(v + 1) * dim];
            for &i in m {
                for (acc, x) in row.iter_mut().zip(f.row(i)) {
                    *acc += x;
                }
            }
            row.iter_mut().for_each(|x| *x /= m.len() as f64);
        }
        cloud.features = Some(FeatureMatrix { dim, data });
    }
    if let Some(h) = pc.fg_prob() {
        cloud.fg_prob = Some(
            members
                .iter()
                .map(|m| m.iter().map(|&i| h[i]).sum::<f64>() / m.len() as f64)
                .collect(),
        );
    }

    Ok(VoxelGrid {
        voxel_size,
        centers: cloud,
        point_to_voxel,
        members,
    })
}

/// Inverse-distance weighted transfer of per-voxel flow onto points, over the
/// `k` nearest voxel centers. A point lying exactly on a center takes that
/// voxel's flow.
pub fn transfer_flow_to_points(
    grid: &VoxelGrid,
    voxel_flow: &FlowField,
    original: &PointCloud,
    k: usize,
) -> Result<FlowField> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if voxel_flow.len() != grid.len() {
        return Err(Error::LengthMismatch(voxel_flow.len(), grid.len()));
    }
    if grid.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let centers = grid.centers().points();
    let index = SpatialHash::new(centers, grid.voxel_size());
    let vectors = original
        .points()
        .iter()
        .map(|p| {
            let nn = index.k_nearest(p, k);
            if let Some(&(j, _)) = nn.iter().find(|(_, d2)| *d2 == 0.0) {
                return voxel_flow.vectors()[j];
            }
            let mut num = Vector3::zeros();
            let mut den = 0.0;
            for (j, d2) in nn {
                let w = 1.0 / d2.sqrt();
                num += voxel_flow.vectors()[j] * w;
                den += w;
            }
            num / den
        })
        .collect();
    FlowField::new(vectors)
}
