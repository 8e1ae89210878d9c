//! Evaluation of the weakly supervised energy: background segmentation,
//! ego-motion and foreground rigidity terms.
//!
//! These are evaluation-only functionals. They serve as diagnostics for a
//! pipeline run and as correctness oracles in tests.

use crate::cluster::ClusterLabeling;
use crate::error::{Error, Result};
use crate::geom::{Point3, RigidTransform, Vector3};
use crate::rigidfit::fit_cluster_transform;
use crate::spatial::SpatialHash;
use crate::transport::AssignmentMatrix;

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyWeights {
    pub lambda_inlier: f64,
    pub lambda_cd: f64,
    /// Divide each Chamfer direction by its point count instead of summing.
    pub chamfer_mean: bool,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            lambda_inlier: 0.005,
            lambda_cd: 0.5,
            chamfer_mean: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBreakdown {
    pub l_bg: f64,
    pub l_trans: f64,
    pub l_inlier: f64,
    pub l_ego: f64,
    pub l_rigid: f64,
    pub l_cd: f64,
    pub l_fg: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn assemble(l_bg: f64, l_trans: f64, l_inlier: f64, l_rigid: f64, l_cd: f64, w: &EnergyWeights) -> Self {
        let l_ego = l_trans + w.lambda_inlier * l_inlier;
        let l_fg = l_rigid + w.lambda_cd * l_cd;
        Self {
            l_bg,
            l_trans,
            l_inlier,
            l_ego,
            l_rigid,
            l_cd,
            l_fg,
            total: l_bg + l_ego + l_fg,
        }
    }
}

/// Mean binary cross-entropy of predicted foreground probabilities.
pub fn bce_mask_loss(pred_fg_prob: &[f64], gt_fg: &[bool]) -> Result<f64> {
    if pred_fg_prob.len() != gt_fg.len() {
        return Err(Error::LengthMismatch(pred_fg_prob.len(), gt_fg.len()));
    }
    if pred_fg_prob.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sum: f64 = pred_fg_prob
        .iter()
        .zip(gt_fg)
        .map(|(&h, &g)| {
            let h = h.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if g {
                -h.ln()
            } else {
                -(1.0 - h).ln()
            }
        })
        .sum();
    Ok(sum / pred_fg_prob.len() as f64)
}

/// Average of the source and target mask losses.
pub fn background_loss(pred_x: &[f64], gt_x: &[bool], pred_y: &[f64], gt_y: &[bool]) -> Result<f64> {
    Ok(0.5 * (bce_mask_loss(pred_x, gt_x)? + bce_mask_loss(pred_y, gt_y)?))
}

fn l1(v: &Vector3) -> f64 {
    v.x.abs() + v.y.abs() + v.z.abs()
}

/// Mean ℓ1 distance between background points moved by the estimated and
/// the reference ego-motion.
pub fn ego_translation_loss(bg_points: &[Point3], est: &RigidTransform, gt: &RigidTransform) -> Result<f64> {
    if bg_points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sum: f64 = bg_points
        .iter()
        .map(|x| l1(&(gt.transform_point(x) - est.transform_point(x))))
        .sum();
    Ok(sum / bg_points.len() as f64)
}

/// Penalty on mass routed to the slack row and column.
pub fn inlier_loss(a: &AssignmentMatrix) -> f64 {
    let (n, m) = (a.n_rows(), a.n_cols());
    let rows: f64 = (0..n).map(|i| 1.0 - a.real_row_mass(i)).sum::<f64>() / n as f64;
    let cols: f64 = (0..m).map(|j| 1.0 - a.real_col_mass(j)).sum::<f64>() / m as f64;
    rows + cols
}

/// Per-cluster mean ℓ1 residual of the flow against its best rigid fit,
/// averaged over clusters. Clusters with fewer than three points cannot be
/// fitted and are left out of the average.
pub fn rigidity_loss(clusters: &ClusterLabeling, points: &[Point3], flow: &[Vector3]) -> Result<f64> {
    if clusters.len() != points.len() {
        return Err(Error::LengthMismatch(clusters.len(), points.len()));
    }
    if flow.len() != points.len() {
        return Err(Error::LengthMismatch(flow.len(), points.len()));
    }
    let mut total = 0.0;
    let mut fitted = 0usize;
    for k in 0..clusters.num_clusters() {
        let idx = clusters.members(k);
        if idx.len() < 3 {
            continue;
        }
        let pts: Vec<Point3> = idx.iter().map(|&i| points[i]).collect();
        let v: Vec<Vector3> = idx.iter().map(|&i| flow[i]).collect();
        let t = fit_cluster_transform(&pts, &v)?;
        let resid: f64 = pts
            .iter()
            .zip(&v)
            .map(|(p, f)| l1(&(t.transform_point(p) - (p + f))))
            .sum();
        total += resid / idx.len() as f64;
        fitted += 1;
    }
    Ok(if fitted == 0 { 0.0 } else { total / fitted as f64 })
}

fn nearest_distance_sum(from: &[Point3], to: &[Point3]) -> f64 {
    let index = SpatialHash::with_auto_cell(to);
    from.iter()
        .map(|p| index.k_nearest(p, 1)[0].1.sqrt())
        .sum()
}

/// Two-way Chamfer distance between warped source foreground and target foreground.
pub fn chamfer_loss(fg_x_warped: &[Point3], fg_y: &[Point3]) -> Result<f64> {
    chamfer_loss_with(fg_x_warped, fg_y, false)
}

pub fn chamfer_loss_with(a: &[Point3], b: &[Point3], mean: bool) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let (ab, ba) = (nearest_distance_sum(a, b), nearest_distance_sum(b, a));
    Ok(if mean {
        ab / a.len() as f64 + ba / b.len() as f64
    } else {
        ab + ba
    })
}

/// Everything needed to evaluate the full energy of one prediction.
#[derive(Debug, Clone, Copy)]
pub struct EnergyInputs<'a> {
    pub fg_prob_x: &'a [f64],
    pub gt_fg_x: &'a [bool],
    pub fg_prob_y: &'a [f64],
    pub gt_fg_y: &'a [bool],
    /// Background points of the source cloud.
    pub bg_x: &'a [Point3],
    pub ego_est: &'a RigidTransform,
    pub ego_gt: &'a RigidTransform,
    /// Sinkhorn assignment of the ego head; the inlier term is zero without one.
    pub assignment: Option<&'a AssignmentMatrix>,
    /// Source foreground points, their flow and their clustering.
    pub fg_x: &'a [Point3],
    pub fg_flow: &'a [Vector3],
    pub clusters: &'a ClusterLabeling,
    pub fg_y: &'a [Point3],
}

pub fn total_energy(inputs: &EnergyInputs<'_>, weights: &EnergyWeights) -> Result<EnergyBreakdown> {
    let l_bg = background_loss(inputs.fg_prob_x, inputs.gt_fg_x, inputs.fg_prob_y, inputs.gt_fg_y)?;
    let l_trans = ego_translation_loss(inputs.bg_x, inputs.ego_est, inputs.ego_gt)?;
    let l_inlier = inputs.assignment.map(inlier_loss).unwrap_or(0.0);
    let l_rigid = rigidity_loss(inputs.clusters, inputs.fg_x, inputs.fg_flow)?;
    let l_cd = if inputs.fg_x.is_empty() && inputs.fg_y.is_empty() {
        0.0
    } else {
        let warped: Vec<Point3> = inputs.fg_x.iter().zip(inputs.fg_flow).map(|(p, v)| p + v).collect();
        chamfer_loss_with(&warped, inputs.fg_y, weights.chamfer_mean)?
    };
    Ok(EnergyBreakdown::assemble(l_bg, l_trans, l_inlier, l_rigid, l_cd, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(rng.random(), rng.random(), rng.random());
        RigidTransform::from_axis_angle(&axis, rng.random_range(-1.0..1.0), Vector3::new(rng.random(), rng.random(), 0.5))
    }

    #[test]
    fn bce_reference_values() {
        let gt = [true, false, true, false];
        let perfect = [1.0 - 1e-7, 1e-7, 1.0, 0.0];
        assert!(bce_mask_loss(&perfect, &gt).unwrap() <= 1e-6);
        let half = [0.5; 4];
        assert!((bce_mask_loss(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_mask_loss(&half, &gt[..3]).is_err());
    }

    #[test]
    fn bce_matches_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p: Vec<f64> = (0..200).map(|_| rng.random_range(0.01..0.99)).collect();
        let g: Vec<bool> = (0..200).map(|_| rng.random()).collect();
        let mut acc = 0.0;
        for i in 0..200 {
            let term = if g[i] { p[i].ln() } else { (1.0 - p[i]).ln() };
            acc -= term;
        }
        assert!((bce_mask_loss(&p, &g).unwrap() - acc / 200.0).abs() < 1e-12);
    }

    #[test]
    fn ego_translation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 100);
        let t = random_transform(&mut rng);
        assert_eq!(ego_translation_loss(&pts, &t, &t).unwrap(), 0.0);

        let shift = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let l = ego_translation_loss(&pts, &shift, &RigidTransform::identity()).unwrap();
        assert!((l - 0.1).abs() < 1e-12);

        let u = random_transform(&mut rng);
        let mut acc = 0.0;
        for p in &pts {
            let d = t.transform_point(p) - u.transform_point(p);
            acc += d.x.abs() + d.y.abs() + d.z.abs();
        }
        assert!((ego_translation_loss(&pts, &t, &u).unwrap() - acc / 100.0).abs() < 1e-12);

        let mut shuffled = pts.clone();
        shuffled.reverse();
        assert!((ego_translation_loss(&shuffled, &t, &u).unwrap() - acc / 100.0).abs() < 1e-12);
    }

    #[test]
    fn inlier_loss_extremes() {
        let mut perm = DMatrix::zeros(4, 4);
        perm[(0, 1)] = 1.0;
        perm[(1, 2)] = 1.0;
        perm[(2, 0)] = 1.0;
        let a = AssignmentMatrix::from_padded(perm).unwrap();
        assert_eq!(inlier_loss(&a), 0.0);

        let mut slack = DMatrix::zeros(4, 4);
        for i in 0..3 {
            slack[(i, 3)] = 1.0;
            slack[(3, i)] = 1.0;
        }
        let a = AssignmentMatrix::from_padded(slack).unwrap();
        assert_eq!(inlier_loss(&a), 2.0);
    }

    #[test]
    fn inlier_loss_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DMatrix::from_fn(6, 5, |_, _| rng.random_range(0.0..0.4));
        let a = AssignmentMatrix::from_padded(m.clone()).unwrap();
        let mut rows = 0.0;
        for i in 0..5 {
            let mut s = 0.0;
            for j in 0..4 {
                s += m[(i, j)];
            }
            rows += 1.0 - s;
        }
        let mut cols = 0.0;
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..5 {
                s += m[(i, j)];
            }
            cols += 1.0 - s;
        }
        assert!((inlier_loss(&a) - (rows / 5.0 + cols / 4.0)).abs() < 1e-12);
    }

    fn three_clusters(rng: &mut ChaCha8Rng) -> (ClusterLabeling, Vec<Point3>) {
        let pts = random_points(rng, 60);
        let labels = (0..60).map(|i| (i % 3) as i32).collect();
        (ClusterLabeling::from_labels(labels).unwrap(), pts)
    }

    #[test]
    fn rigid_flow_has_zero_rigidity_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (labels, pts) = three_clusters(&mut rng);
        let ts: Vec<RigidTransform> = (0..3).map(|_| random_transform(&mut rng)).collect();
        let flow: Vec<Vector3> = pts
            .iter()
            .zip(labels.labels())
            .map(|(p, &l)| ts[l as usize].flow_at(p))
            .collect();
        assert!(rigidity_loss(&labels, &pts, &flow).unwrap() < 1e-10);
    }

    #[test]
    fn nonrigid_flow_has_positive_rigidity_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (labels, pts) = three_clusters(&mut rng);
        let flow: Vec<Vector3> = pts.iter().map(|p| Vector3::new(p.x * p.x, 0.0, p.y * 0.3)).collect();
        assert!(rigidity_loss(&labels, &pts, &flow).unwrap() > 1e-3);
    }

    #[test]
    fn single_point_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 40);
        let labels = ClusterLabeling::from_labels(vec![0; 40]).unwrap();
        let t = random_transform(&mut rng);
        let mut flow: Vec<Vector3> = pts.iter().map(|p| t.flow_at(p)).collect();
        flow[7] += Vector3::new(0.02, -0.01, 0.005);
        let loss = rigidity_loss(&labels, &pts, &flow).unwrap();
        // Direct recomputation: refit, then mean ℓ1 residual.
        let refit = fit_cluster_transform(&pts, &flow).unwrap();
        let direct: f64 = pts
            .iter()
            .zip(&flow)
            .map(|(p, v)| {
                let d = refit.transform_point(p) - (p + v);
                d.x.abs() + d.y.abs() + d.z.abs()
            })
            .sum::<f64>()
            / 40.0;
        assert!((loss - direct).abs() < 1e-12);
        // Least squares gives Σ‖rᵢ‖² ≤ ‖δ‖², hence Σ‖rᵢ‖₁ ≤ √(3N)·‖δ‖.
        let delta = Vector3::new(0.02, -0.01, 0.005).norm();
        assert!(loss > 0.0 && loss <= (3.0f64 * 40.0).sqrt() * delta / 40.0);
    }

    #[test]
    fn tiny_clusters_are_skipped() {
        let pts = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        let labels = ClusterLabeling::from_labels(vec![0, 0]).unwrap();
        let flow = vec![Vector3::x(), Vector3::y()];
        assert_eq!(rigidity_loss(&labels, &pts, &flow).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_points(&mut rng, 30);
        assert_eq!(chamfer_loss(&a, &a).unwrap(), 0.0);
        let one = [Point3::origin()];
        let other = [Point3::new(0.0, 1.0, 0.0)];
        assert_eq!(chamfer_loss(&one, &other).unwrap(), 2.0);
        assert_eq!(chamfer_loss(&[], &other), Err(Error::EmptyForeground));

        let b = random_points(&mut rng, 60);
        let a = random_points(&mut rng, 50);
        let brute = |p: &[Point3], q: &[Point3]| -> f64 {
            p.iter()
                .map(|x| q.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min))
                .sum()
        };
        let expect = brute(&a, &b) + brute(&b, &a);
        assert!((chamfer_loss(&a, &b).unwrap() - expect).abs() < 1e-10);
        assert!((chamfer_loss(&b, &a).unwrap() - expect).abs() < 1e-10);
        let mean = chamfer_loss_with(&a, &b, true).unwrap();
        assert!((mean - (brute(&a, &b) / 50.0 + brute(&b, &a) / 60.0)).abs() < 1e-12);
    }

    #[test]
    fn weighted_sums() {
        let w = EnergyWeights::default();
        let e = EnergyBreakdown::assemble(0.0, 1.0, 2.0, 0.0, 0.0, &w);
        assert!((e.l_ego - 1.01).abs() < 1e-15);
        let e = EnergyBreakdown::assemble(0.0, 0.0, 0.0, 1.0, 2.0, &w);
        assert_eq!(e.l_fg, 2.0);
        assert_eq!(e.total, e.l_bg + e.l_ego + e.l_fg);
    }
}
