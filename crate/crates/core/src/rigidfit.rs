//! Closed-form weighted Kabsch alignment, ego-motion from soft
//! correspondences and per-cluster rigid fits from flow.

use nalgebra::{Matrix3, SVD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform, Vector3};
use crate::transport::{self, AssignmentMatrix};

/// Relative size of the second singular value of the covariance below which
/// the correspondence geometry is treated as collinear.
pub const COLLINEARITY_THRESHOLD: f64 = 1e-12;

/// Index-aligned source/target pairs with nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCorrespondenceSet {
    source: Vec<Point3>,
    target: Vec<Point3>,
    weights: Vec<f64>,
}

impl WeightedCorrespondenceSet {
    pub fn new(source: Vec<Point3>, target: Vec<Point3>, weights: Vec<f64>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::LengthMismatch(source.len(), target.len()));
        }
        if weights.len() != source.len() {
            return Err(Error::LengthMismatch(weights.len(), source.len()));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param(
                "weights",
                format!("weight {} at index {i} is not finite and nonnegative", weights[i]),
            ));
        }
        Ok(Self {
            source,
            target,
            weights,
        })
    }

    pub fn uniform(source: Vec<Point3>, target: Vec<Point3>) -> Result<Self> {
        let n = source.len();
        Self::new(source, target, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &[Point3] {
        &self.source
    }

    pub fn target(&self) -> &[Point3] {
        &self.target
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ w_l ‖R·x_l + t − q_l‖²`.
    pub fn residual(&self, t: &RigidTransform) -> f64 {
        self.source
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((x, q), w)| w * (t.transform_point(x) - q).norm_squared())
            .sum()
    }
}

/// Minimizes `Σ w_l ‖R·x_l + t − q_l‖²` over rotations and translations.
pub fn weighted_kabsch(c: &WeightedCorrespondenceSet) -> Result<RigidTransform> {
    let total: f64 = c.weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroTotalWeight);
    }
    if c.weights.iter().filter(|w| **w > 0.0).count() < 3 {
        return Err(Error::DegenerateGeometry);
    }

    let mut src_mean = Vector3::zeros();
    let mut dst_mean = Vector3::zeros();
    for ((x, q), w) in c.source.iter().zip(&c.target).zip(&c.weights) {
        src_mean += x.coords * *w;
        dst_mean += q.coords * *w;
    }
    src_mean /= total;
    dst_mean /= total;

    let mut cov = Matrix3::zeros();
    for ((x, q), w) in c.source.iter().zip(&c.target).zip(&c.weights) {
        cov += (x.coords - src_mean) * (q.coords - dst_mean).transpose() * *w;
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry),
    };
    let sv = svd.singular_values;
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 0.0) || sorted[1] < COLLINEARITY_THRESHOLD * sorted[0] {
        return Err(Error::DegenerateGeometry);
    }

    let v = v_t.transpose();
    let mut correction = Matrix3::identity();
    // The reflection fix belongs on the weakest singular direction.
    let weakest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap_or(2);
    if (v * u.transpose()).determinant() < 0.0 {
        correction[(weakest, weakest)] = -1.0;
    }
    let rotation = v * correction * u.transpose();
    let translation = dst_mean - rotation * src_mean;
    Ok(RigidTransform::from_parts_unchecked(rotation, translation))
}

/// Parameters of the ego-motion head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoParams {
    pub tau: f64,
    pub n_sample: usize,
    /// Feature distance at which a real match ties with the slack entry.
    pub slack_distance: f64,
    pub iterations: usize,
}

impl Default for EgoParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            n_sample: 1024,
            slack_distance: 0.2,
            iterations: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoEstimate {
    pub transform: RigidTransform,
    pub assignment: AssignmentMatrix,
    /// Indices into the source background that were sampled.
    pub source_indices: Vec<usize>,
    /// Indices into the target background that were sampled.
    pub target_indices: Vec<usize>,
    /// Per-sample correspondence weights `Σ_j a_ij`.
    pub weights: Vec<f64>,
}

fn sample_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Background transform mapping `bg_x` onto `bg_y`, estimated through
/// Sinkhorn soft correspondences in feature space and weighted Kabsch.
pub fn estimate_ego_motion<R: Rng + ?Sized>(
    bg_x: &PointCloud,
    bg_y: &PointCloud,
    params: &EgoParams,
    rng: &mut R,
) -> Result<EgoEstimate> {
    let fx = bg_x.features().ok_or(Error::MissingAttribute("features"))?;
    let fy = bg_y.features().ok_or(Error::MissingAttribute("features"))?;
    if fx.dim() != fy.dim() {
        return Err(Error::FeatureDimension(fx.dim(), fy.dim()));
    }
    if bg_x.len() < 3 || bg_y.len() < 3 {
        return Err(Error::InsufficientPoints(bg_x.len().min(bg_y.len())));
    }
    if params.n_sample < 3 {
        return Err(Error::param("n_sample", "must be at least 3"));
    }

    let source_indices = sample_indices(rng, bg_x.len(), params.n_sample);
    let target_indices = sample_indices(rng, bg_y.len(), params.n_sample);
    let xs = bg_x.select(&source_indices);
    let ys = bg_y.select(&target_indices);

    let m = transport::affinity(
        xs.features().expect("selected features"),
        ys.features().expect("selected features"),
        params.tau,
    )?;
    let padded = transport::add_slack(&m, transport::slack_value(params.slack_distance, params.tau))?;
    let assignment = transport::sinkhorn(&padded, params.iterations)?;
    let (corr, weights) = transport::soft_correspondences(&assignment, xs.points(), ys.points())?;

    let set = WeightedCorrespondenceSet::new(xs.points().to_vec(), corr.points().to_vec(), weights.clone())?;
    let transform = weighted_kabsch(&set)?;
    Ok(EgoEstimate {
        transform,
        assignment,
        source_indices,
        target_indices,
        weights,
    })
}

/// Transform best explaining `points + flow` from `points` (unweighted Kabsch).
pub fn fit_cluster_transform(points: &[Point3], flow: &[Vector3]) -> Result<RigidTransform> {
    if points.len() != flow.len() {
        return Err(Error::LengthMismatch(points.len(), flow.len()));
    }
    let target = points.iter().zip(flow).map(|(p, v)| p + v).collect();
    weighted_kabsch(&WeightedCorrespondenceSet::uniform(points.to_vec(), target)?)
}

/// As [`fit_cluster_transform`], with per-point confidence weights.
pub fn fit_cluster_transform_weighted(
    points: &[Point3],
    flow: &[Vector3],
    weights: &[f64],
) -> Result<RigidTransform> {
    if points.len() != flow.len() {
        return Err(Error::LengthMismatch(points.len(), flow.len()));
    }
    let target = points.iter().zip(flow).map(|(p, v)| p + v).collect();
    weighted_kabsch(&WeightedCorrespondenceSet::new(points.to_vec(), target, weights.to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::FeatureMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        RigidTransform::from_axis_angle(&axis, rng.random_range(-3.1..3.1), t)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                )
            })
            .collect()
    }

    fn assert_close(a: &RigidTransform, b: &RigidTransform, tol: f64) {
        assert!((a.rotation() - b.rotation()).amax() < tol, "{a:?} vs {b:?}");
        assert!((a.translation() - b.translation()).amax() < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn identity_for_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = random_points(&mut rng, 20, 2.0);
        let t = weighted_kabsch(&WeightedCorrespondenceSet::uniform(pts.clone(), pts).unwrap()).unwrap();
        assert_close(&t, &RigidTransform::identity(), 1e-10);
    }

    #[test]
    fn recovers_forward_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let gt = random_transform(&mut rng);
            let src = random_points(&mut rng, 30, 5.0);
            let dst = src.iter().map(|p| gt.transform_point(p)).collect();
            let t = weighted_kabsch(&WeightedCorrespondenceSet::uniform(src, dst).unwrap()).unwrap();
            assert_close(&t, &gt, 1e-8);
        }
    }

    #[test]
    fn zero_weights_mask_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_transform(&mut rng);
        let src = random_points(&mut rng, 40, 5.0);
        let mut dst: Vec<Point3> = src.iter().map(|p| gt.transform_point(p)).collect();
        let mut weights = vec![1.0; 40];
        for i in (0..40).step_by(2) {
            dst[i] += Vector3::new(rng.random_range(-50.0..50.0), 30.0, -20.0);
            weights[i] = 0.0;
        }
        let t = weighted_kabsch(&WeightedCorrespondenceSet::new(src, dst, weights).unwrap()).unwrap();
        assert_close(&t, &gt, 1e-8);
    }

    #[test]
    fn planar_reflection_is_guarded() {
        // A planar set mirrored through its own plane: the unguarded solution is a reflection.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src: Vec<Point3> = (0..10)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
            .collect();
        let dst: Vec<Point3> = src.iter().map(|p| Point3::new(-p.x, p.y, 0.0)).collect();
        let t = weighted_kabsch(&WeightedCorrespondenceSet::uniform(src, dst).unwrap()).unwrap();
        assert!((t.rotation().determinant() - 1.0).abs() < 1e-9);
        assert!((t.rotation().transpose() * t.rotation() - Matrix3::identity()).amax() < 1e-9);
    }

    #[test]
    fn degenerate_inputs_are_reported() {
        let line: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let set = WeightedCorrespondenceSet::uniform(line.clone(), line.clone()).unwrap();
        assert_eq!(weighted_kabsch(&set), Err(Error::DegenerateGeometry));

        let zero = WeightedCorrespondenceSet::new(line.clone(), line.clone(), vec![0.0; 10]).unwrap();
        assert_eq!(weighted_kabsch(&zero), Err(Error::ZeroTotalWeight));

        let two = WeightedCorrespondenceSet::uniform(line[..2].to_vec(), line[..2].to_vec()).unwrap();
        assert_eq!(weighted_kabsch(&two), Err(Error::DegenerateGeometry));

        assert!(WeightedCorrespondenceSet::new(line.clone(), line, vec![-1.0; 10]).is_err());
    }

    #[test]
    fn weight_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_transform(&mut rng);
        let src = random_points(&mut rng, 25, 3.0);
        let dst: Vec<Point3> = src
            .iter()
            .map(|p| gt.transform_point(p) + Vector3::new(rng.random_range(-0.1..0.1), 0.05, 0.0))
            .collect();
        let w: Vec<f64> = (0..25).map(|_| rng.random_range(0.1..1.0)).collect();
        let base = weighted_kabsch(&WeightedCorrespondenceSet::new(src.clone(), dst.clone(), w.clone()).unwrap()).unwrap();
        for c in [1e-3, 7.0, 1e4] {
            let scaled = w.iter().map(|v| v * c).collect();
            let t = weighted_kabsch(&WeightedCorrespondenceSet::new(src.clone(), dst.clone(), scaled).unwrap()).unwrap();
            assert_close(&t, &base, 1e-12);
        }
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = random_points(&mut rng, 25, 3.0);
        let dst: Vec<Point3> = src
            .iter()
            .map(|p| p + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.4))
            .collect();
        let base = weighted_kabsch(&WeightedCorrespondenceSet::uniform(src.clone(), dst.clone()).unwrap()).unwrap();
        let g = random_transform(&mut rng);
        let gs = src.iter().map(|p| g.transform_point(p)).collect();
        let gd = dst.iter().map(|p| g.transform_point(p)).collect();
        let t = weighted_kabsch(&WeightedCorrespondenceSet::uniform(gs, gd).unwrap()).unwrap();
        let conj = g.compose(&base).compose(&g.inverse());
        assert_close(&t, &conj, 1e-9);
    }

    #[test]
    fn cluster_fit_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = random_points(&mut rng, 30, 2.0);
        let t = fit_cluster_transform(&pts, &vec![Vector3::zeros(); 30]).unwrap();
        assert_close(&t, &RigidTransform::identity(), 1e-10);

        let gt = random_transform(&mut rng);
        let flow: Vec<Vector3> = pts.iter().map(|p| gt.flow_at(p)).collect();
        assert_close(&fit_cluster_transform(&pts, &flow).unwrap(), &gt, 1e-8);
    }

    #[test]
    fn noisy_cluster_fit_rms_below_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigma = 0.01;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let gt = random_transform(&mut rng);
            let pts = random_points(&mut rng, 30, 2.0);
            let flow: Vec<Vector3> = pts
                .iter()
                .map(|p| {
                    gt.flow_at(p)
                        + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
                })
                .collect();
            let t = fit_cluster_transform(&pts, &flow).unwrap();
            let ms: f64 = pts
                .iter()
                .map(|p| (t.flow_at(p) - gt.flow_at(p)).norm_squared())
                .sum::<f64>()
                / pts.len() as f64;
            worst = worst.max(ms.sqrt());
        }
        assert!(worst <= sigma, "worst induced RMS {worst}");
    }

    fn oracle_clouds(
        rng: &mut ChaCha8Rng,
        n: usize,
        gt: &RigidTransform,
        unmatched: usize,
    ) -> (PointCloud, PointCloud) {
        let pts = random_points(rng, n, 10.0);
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0) * 2.0).collect())
            .collect();
        let y_pts: Vec<Point3> = pts.iter().map(|p| gt.transform_point(p)).collect();
        let mut y_feats = feats.clone();
        for f in y_feats.iter_mut().take(unmatched) {
            *f = (0..16).map(|_| rng.random_range(-1.0..1.0) * 2.0).collect();
        }
        let x = PointCloud::new(pts)
            .unwrap()
            .with_features(FeatureMatrix::from_rows(&feats).unwrap())
            .unwrap();
        let y = PointCloud::new(y_pts)
            .unwrap()
            .with_features(FeatureMatrix::from_rows(&y_feats).unwrap())
            .unwrap();
        (x, y)
    }

    #[test]
    fn ego_motion_with_oracle_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_transform(&mut rng);
        let (x, y) = oracle_clouds(&mut rng, 300, &gt, 0);
        let est = estimate_ego_motion(&x, &y, &EgoParams::default(), &mut rng).unwrap();
        assert_close(&est.transform, &gt, 1e-6);

        let same = estimate_ego_motion(&x, &x, &EgoParams::default(), &mut rng).unwrap();
        assert_close(&same.transform, &RigidTransform::identity(), 1e-9);
    }

    #[test]
    fn ego_motion_with_occlusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_transform(&mut rng);
        let (x, y) = oracle_clouds(&mut rng, 1024, &gt, 205);
        let est = estimate_ego_motion(&x, &y, &EgoParams::default(), &mut rng).unwrap();
        let rel = est.transform.compose(&gt.inverse());
        assert!(rel.rotation_angle().to_degrees() < 0.5);
        assert!((est.transform.translation() - gt.translation()).norm() < 0.05);
    }

    #[test]
    fn ego_motion_requires_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bare = PointCloud::new(random_points(&mut rng, 5, 1.0)).unwrap();
        assert!(matches!(
            estimate_ego_motion(&bare, &bare, &EgoParams::default(), &mut rng),
            Err(Error::MissingAttribute(_))
        ));
    }
}
