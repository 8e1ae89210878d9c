//! Test-time point-to-point ICP refinement of ego-motion and object transforms.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform};
use crate::pipeline::SceneDecomposition;
use crate::rigidfit::{weighted_kabsch, WeightedCorrespondenceSet};
use crate::spatial::SpatialHash;

/// RMSE below this many meters counts as an exact fit.
pub const RMSE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    /// Stop once the relative RMSE decrease falls below this.
    pub convergence_epsilon: f64,
}

impl IcpConfig {
    pub fn background() -> Self {
        Self {
            max_correspondence_distance: 0.15,
            max_iterations: 300,
            convergence_epsilon: 1e-6,
        }
    }

    pub fn object() -> Self {
        Self {
            max_correspondence_distance: 0.25,
            ..Self::background()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_correspondence_distance > 0.0 && self.max_correspondence_distance.is_finite()) {
            return Err(Error::param("max_correspondence_distance", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations", "must be at least 1"));
        }
        if !(self.convergence_epsilon > 0.0) {
            return Err(Error::param("convergence_epsilon", "must be positive"));
        }
        Ok(())
    }
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self::background()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcpStatus {
    Converged,
    MaxIterations,
    /// A step would have raised the matched-inlier RMSE, so the previous
    /// estimate was kept.
    Stalled,
    /// Fewer than three matched pairs, or collinear ones.
    Degenerate,
    /// Nothing matched within the gate at the initial estimate.
    NoOverlap,
}

impl IcpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            IcpStatus::Converged => "converged",
            IcpStatus::MaxIterations => "max-iterations",
            IcpStatus::Stalled => "stalled",
            IcpStatus::Degenerate => "degenerate",
            IcpStatus::NoOverlap => "no-overlap",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub status: IcpStatus,
    pub iterations: usize,
    /// Matched-inlier RMSE at the initial and the returned transform.
    pub initial_rmse: f64,
    pub final_rmse: f64,
    /// RMSE of every accepted estimate, starting with the initial one.
    pub rmse_history: Vec<f64>,
    /// Number of matched pairs at the returned transform.
    pub inliers: usize,
}

struct Matching {
    pairs: Vec<(usize, usize)>,
    rmse: f64,
}

fn match_within(source: &[Point3], index: &SpatialHash<'_>, t: &RigidTransform, gate: f64) -> Matching {
    let mut pairs = Vec::new();
    let mut sq = 0.0;
    for (i, p) in source.iter().enumerate() {
        if let Some((j, d2)) = index.nearest_within(&t.transform_point(p), gate) {
            pairs.push((i, j));
            sq += d2;
        }
    }
    let rmse = if pairs.is_empty() {
        f64::INFINITY
    } else {
        (sq / pairs.len() as f64).sqrt()
    };
    Matching { pairs, rmse }
}

/// RMSE over source points whose nearest target under `t` lies within
/// `gate`, with the number of such points. `None` if none match.
pub fn matched_inlier_rmse(source: &[Point3], target: &[Point3], t: &RigidTransform, gate: f64) -> Option<(f64, usize)> {
    let index = SpatialHash::new(target, gate);
    let m = match_within(source, &index, t, gate);
    (!m.pairs.is_empty()).then_some((m.rmse, m.pairs.len()))
}

/// Point-to-point ICP starting from `initial`. A step is only accepted when
/// it does not raise the matched-inlier RMSE, so the result never fits worse
/// than `initial`.
pub fn icp_refine(source: &PointCloud, target: &PointCloud, initial: &RigidTransform, cfg: &IcpConfig) -> Result<IcpResult> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let gate = cfg.max_correspondence_distance;
    let src = source.points();
    let tgt = target.points();
    let index = SpatialHash::new(tgt, gate);

    let mut current = *initial;
    let mut m = match_within(src, &index, &current, gate);
    if m.pairs.is_empty() {
        return Ok(IcpResult {
            transform: current,
            status: IcpStatus::NoOverlap,
            iterations: 0,
            initial_rmse: f64::INFINITY,
            final_rmse: f64::INFINITY,
            rmse_history: Vec::new(),
            inliers: 0,
        });
    }
    let initial_rmse = m.rmse;
    let mut history = vec![m.rmse];
    let mut status = IcpStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        if m.rmse <= RMSE_FLOOR {
            status = IcpStatus::Converged;
            break;
        }
        iterations += 1;
        let moved: Vec<Point3> = m.pairs.iter().map(|&(i, _)| current.transform_point(&src[i])).collect();
        let matched: Vec<Point3> = m.pairs.iter().map(|&(_, j)| tgt[j]).collect();
        let delta = match WeightedCorrespondenceSet::uniform(moved, matched).and_then(|c| weighted_kabsch(&c)) {
            Ok(d) => d,
            Err(e) if e.is_numerical() || matches!(e, Error::InsufficientPoints(_)) => {
                status = IcpStatus::Degenerate;
                break;
            }
            Err(e) => return Err(e),
        };
        let candidate = delta.compose(&current);
        let next = match_within(src, &index, &candidate, gate);
        if next.pairs.is_empty() || next.rmse > m.rmse {
            let rel_rise = (next.rmse - m.rmse) / m.rmse;
            status = if rel_rise < cfg.convergence_epsilon {
                IcpStatus::Converged
            } else {
                IcpStatus::Stalled
            };
            break;
        }
        let rel = (m.rmse - next.rmse) / m.rmse;
        current = candidate;
        m = next;
        history.push(m.rmse);
        if rel < cfg.convergence_epsilon {
            status = IcpStatus::Converged;
            break;
        }
    }

    Ok(IcpResult {
        transform: current,
        status,
        iterations,
        initial_rmse,
        final_rmse: m.rmse,
        rmse_history: history,
        inliers: m.pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub background: IcpConfig,
    pub object: IcpConfig,
    /// Clusters with fewer points keep their transform.
    pub min_points: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            background: IcpConfig::background(),
            object: IcpConfig::object(),
            min_points: 10,
        }
    }
}

/// Outcome of each refined entity; `None` where an entity was left alone.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefineReport {
    pub ego: Option<IcpResult>,
    pub clusters: Vec<Option<IcpResult>>,
}

/// Refines the ego-motion against the background of `y` and each cluster
/// transform against all foreground points of `y`. Masks and labels are
/// carried over untouched.
pub fn refine_scene(
    decomp: &SceneDecomposition,
    x: &PointCloud,
    y: &PointCloud,
    cfg: &RefineConfig,
) -> Result<(SceneDecomposition, RefineReport)> {
    cfg.background.validate()?;
    cfg.object.validate()?;
    if decomp.bg_mask_x.len() != x.len() || decomp.clusters.len() != x.len() {
        return Err(Error::LengthMismatch(decomp.bg_mask_x.len(), x.len()));
    }
    if decomp.bg_mask_y.len() != y.len() {
        return Err(Error::LengthMismatch(decomp.bg_mask_y.len(), y.len()));
    }
    let pick = |mask: &[bool], want: bool| -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &b)| b == want).map(|(i, _)| i).collect()
    };
    let bg_x = x.select(&pick(&decomp.bg_mask_x, true));
    let bg_y = y.select(&pick(&decomp.bg_mask_y, true));
    let fg_y = y.select(&pick(&decomp.bg_mask_y, false));

    let ego = if bg_x.is_empty() || bg_y.is_empty() {
        None
    } else {
        Some(icp_refine(&bg_x, &bg_y, &decomp.ego, &cfg.background)?)
    };

    let clusters = decomp
        .cluster_transforms
        .par_iter()
        .enumerate()
        .map(|(k, t)| -> Result<Option<IcpResult>> {
            let Some(t) = t else { return Ok(None) };
            let members = decomp.clusters.members(k);
            if members.len() < cfg.min_points || fg_y.is_empty() {
                return Ok(None);
            }
            icp_refine(&x.select(&members), &fg_y, t, &cfg.object).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = decomp.clone();
    if let Some(r) = &ego {
        out.ego = r.transform;
    }
    for (slot, r) in out.cluster_transforms.iter_mut().zip(&clusters) {
        if let Some(r) = r {
            *slot = Some(r.transform);
        }
    }
    Ok((out, RefineReport { ego, clusters }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClusterLabeling;
    use crate::geom::{apply_transform, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Points on a bumpy, asymmetric closed surface of radius about 1 m.
    fn blob_surface(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let s = (1.0 - z * z).sqrt();
                let dir = Vector3::new(s * phi.cos(), s * phi.sin(), z);
                let r = 1.0 + 0.3 * (3.0 * dir.x).sin() * (2.0 * dir.y).cos() + 0.2 * dir.z * dir.z;
                Point3::from(dir.component_mul(&Vector3::new(1.6, 1.0, 0.7)) * r)
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn perturbation(rng: &mut ChaCha8Rng, deg: f64, meters: f64) -> RigidTransform {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            .normalize();
        RigidTransform::from_axis_angle(&axis, deg.to_radians(), dir * meters)
    }

    fn transform_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
        let d = a.compose(&b.inverse());
        (d.rotation_angle(), (a.translation() - b.translation()).norm())
    }

    #[test]
    fn exact_initial_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = blob_surface(&mut rng, 2000);
        let gt = RigidTransform::from_axis_angle(&Vector3::y(), 0.3, Vector3::new(0.5, 0.0, -0.2));
        let tgt = apply_transform(&gt, &src);
        let r = icp_refine(&src, &tgt, &gt, &IcpConfig::object()).unwrap();
        assert!(r.iterations <= 1);
        assert_eq!(r.status, IcpStatus::Converged);
        let (rot, trans) = transform_error(&r.transform, &gt);
        assert!(rot < 1e-9 && trans < 1e-9);
    }

    #[test]
    fn recovers_small_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = blob_surface(&mut rng, 3000);
        for _ in 0..5 {
            let gt = perturbation(&mut rng, 20.0, 1.0);
            let tgt = apply_transform(&gt, &src);
            let init = perturbation(&mut rng, 2.0, 0.1).compose(&gt);
            let r = icp_refine(&src, &tgt, &init, &IcpConfig::object()).unwrap();
            let (rot, trans) = transform_error(&r.transform, &gt);
            assert!(rot < 1e-4 && trans < 1e-4, "{rot} {trans} {:?}", r.status);
            assert!(r.iterations <= 300);
        }
    }

    #[test]
    fn rmse_history_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = blob_surface(&mut rng, 1500);
        let gt = perturbation(&mut rng, 10.0, 0.5);
        let noisy: Vec<Point3> = apply_transform(&gt, &src)
            .points()
            .iter()
            .map(|p| p + Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), 0.0))
            .collect();
        let tgt = PointCloud::new(noisy).unwrap();
        let init = perturbation(&mut rng, 3.0, 0.15).compose(&gt);
        let r = icp_refine(&src, &tgt, &init, &IcpConfig::object()).unwrap();
        assert!(r.rmse_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.final_rmse <= r.initial_rmse);
    }

    #[test]
    fn disjoint_clouds_report_no_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = blob_surface(&mut rng, 200);
        let tgt = apply_transform(&RigidTransform::from_translation(Vector3::new(10.0, 0.0, 0.0)), &src);
        let init = RigidTransform::identity();
        let r = icp_refine(&src, &tgt, &init, &IcpConfig::background()).unwrap();
        assert_eq!(r.status, IcpStatus::NoOverlap);
        assert_eq!(r.transform, init);
    }

    #[test]
    fn equivariant_under_global_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = blob_surface(&mut rng, 1500);
        let gt = perturbation(&mut rng, 15.0, 0.8);
        let tgt = apply_transform(&gt, &src);
        let init = perturbation(&mut rng, 2.0, 0.1).compose(&gt);
        let g = perturbation(&mut rng, 70.0, 4.0);
        let cfg = IcpConfig::object();
        let a = icp_refine(&src, &tgt, &init, &cfg).unwrap().transform;
        let conj = |t: &RigidTransform| g.compose(t).compose(&g.inverse());
        let b = icp_refine(&apply_transform(&g, &src), &apply_transform(&g, &tgt), &conj(&init), &cfg)
            .unwrap()
            .transform;
        let expect = conj(&a);
        assert!((b.rotation() - expect.rotation()).amax() < 1e-8);
        assert!((b.translation() - expect.translation()).amax() < 1e-8);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let pc = PointCloud::new(vec![Point3::origin()]).unwrap();
        let cfg = IcpConfig {
            max_iterations: 0,
            ..IcpConfig::background()
        };
        assert!(icp_refine(&pc, &pc, &RigidTransform::identity(), &cfg).is_err());
        assert!(icp_refine(&PointCloud::default(), &pc, &RigidTransform::identity(), &IcpConfig::background()).is_err());
    }

    fn two_body_scene(rng: &mut ChaCha8Rng, small: usize) -> (PointCloud, PointCloud, SceneDecomposition, RigidTransform) {
        // Background: a wavy ground patch. Foreground: a blob and a tiny cluster.
        let mut pts = Vec::new();
        for _ in 0..1500 {
            let (u, v): (f64, f64) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            pts.push(Point3::new(u, 0.3 * (u * 0.7).sin() + 0.2 * (v * 0.9).cos(), v));
        }
        let n_bg = pts.len();
        let blob = blob_surface(rng, 400);
        pts.extend(blob.points().iter().map(|p| p + Vector3::new(0.0, 2.0, 0.0)));
        let n_blob = blob.len();
        for i in 0..small {
            pts.push(Point3::new(4.0 + 0.05 * i as f64, 3.0, 4.0));
        }
        let x = PointCloud::new(pts).unwrap();
        let ego = RigidTransform::from_axis_angle(&Vector3::y(), 0.05, Vector3::new(0.3, 0.0, 0.1));
        let obj = RigidTransform::from_axis_angle(&Vector3::y(), 0.1, Vector3::new(0.5, 0.0, 0.0));
        let mut y_pts = Vec::new();
        for (i, p) in x.points().iter().enumerate() {
            let t = if i < n_bg { ego } else if i < n_bg + n_blob { obj } else { ego };
            y_pts.push(t.transform_point(p));
        }
        let y = PointCloud::new(y_pts).unwrap();
        let n = x.len();
        let bg: Vec<bool> = (0..n).map(|i| i < n_bg).collect();
        let mut labels = vec![-1; n];
        for (i, l) in labels.iter_mut().enumerate().skip(n_bg) {
            *l = if i < n_bg + n_blob { 0 } else { 1 };
        }
        let decomp = SceneDecomposition {
            fg_prob_x: bg.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
            fg_prob_y: bg.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
            bg_mask_x: bg.clone(),
            bg_mask_y: bg,
            clusters: ClusterLabeling::from_labels(labels).unwrap(),
            ego,
            cluster_transforms: vec![Some(obj), Some(ego)],
        };
        (x, y, decomp, obj)
    }

    #[test]
    fn exact_scene_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, y, decomp, _) = two_body_scene(&mut rng, 12);
        let (out, report) = refine_scene(&decomp, &x, &y, &RefineConfig::default()).unwrap();
        let (r, t) = transform_error(&out.ego, &decomp.ego);
        assert!(r < 1e-8 && t < 1e-8);
        for (a, b) in out.cluster_transforms.iter().zip(&decomp.cluster_transforms) {
            let (r, t) = transform_error(&a.unwrap(), &b.unwrap());
            assert!(r < 1e-8 && t < 1e-8);
        }
        assert!(report.ego.is_some());
        assert_eq!(out.clusters, decomp.clusters);
        assert_eq!(out.bg_mask_x, decomp.bg_mask_x);
    }

    #[test]
    fn perturbed_ego_is_refined_and_sparse_cluster_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, y, mut decomp, obj) = two_body_scene(&mut rng, 5);
        let gt_ego = decomp.ego;
        let wrong_small = RigidTransform::from_translation(Vector3::new(0.0, 0.1, 0.0));
        decomp.ego = RigidTransform::from_axis_angle(&Vector3::new(0.3, 1.0, 0.2), 1f64.to_radians(), Vector3::new(0.05, 0.0, 0.0))
            .compose(&gt_ego);
        decomp.cluster_transforms[0] = Some(perturbation(&mut rng, 1.0, 0.05).compose(&obj));
        decomp.cluster_transforms[1] = Some(wrong_small);
        let (out, report) = refine_scene(&decomp, &x, &y, &RefineConfig::default()).unwrap();
        let (r, t) = transform_error(&out.ego, &gt_ego);
        assert!(r.to_degrees() < 0.1 && t < 0.01, "{} {}", r.to_degrees(), t);
        let (r, t) = transform_error(&out.cluster_transforms[0].unwrap(), &obj);
        assert!(r < 1e-6 && t < 1e-6);
        assert_eq!(out.cluster_transforms[1], Some(wrong_small));
        assert!(report.clusters[1].is_none());
    }
}
