use nalgebra::Matrix3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigidflow::transport::{add_slack, affinity, sinkhorn, slack_value};
use rigidflow::*;

fn point() -> impl Strategy<Value = Point3> {
    (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (point(), -3.1..3.1f64, point()).prop_filter_map("zero axis", |(axis, angle, t)| {
        (axis.coords.norm() > 1e-3).then(|| RigidTransform::from_axis_angle(&axis.coords, angle, t.coords))
    })
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(point(), 1..max)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Two labelings describe the same partition (noise must match exactly).
fn same_partition(a: &[i32], b: &[i32]) -> bool {
    use std::collections::HashMap;
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        if (x < 0) != (y < 0) {
            return false;
        }
        x < 0 || (*fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transforms_preserve_distances(t in transform(), pts in cloud(30)) {
        let pc = PointCloud::new(pts.clone()).unwrap();
        let moved = apply_transform(&t, &pc);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d0 = (pts[i] - pts[j]).norm();
                let d1 = (moved.points()[i] - moved.points()[j]).norm();
                prop_assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn compose_with_inverse_is_identity(a in transform(), b in transform()) {
        let id = compose(&a, &invert(&a));
        prop_assert!((id.rotation() - Matrix3::identity()).amax() < 1e-12);
        prop_assert!(id.translation().amax() < 1e-12);
        let ab = compose(&a, &b);
        prop_assert!((ab.rotation().determinant() - 1.0).abs() < 1e-9);
        let p = Point3::new(0.3, -1.2, 2.0);
        prop_assert!((ab.transform_point(&p) - a.transform_point(&b.transform_point(&p))).norm() < 1e-9);
    }

    #[test]
    fn voxelize_is_idempotent_on_centers(pts in cloud(200), size in 0.2..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pc = PointCloud::new(pts).unwrap();
        let g1 = voxelize(&pc, size, usize::MAX, &mut rng).unwrap();
        let g2 = voxelize(g1.centers(), size, usize::MAX, &mut rng).unwrap();
        prop_assert_eq!(g2.len(), g1.len());
        prop_assert_eq!(g2.centers().points(), g1.centers().points());
    }

    #[test]
    fn kabsch_recovers_noiseless_transform(t in transform(), pts in prop::collection::vec(point(), 4..40)) {
        let target: Vec<Point3> = pts.iter().map(|p| t.transform_point(p)).collect();
        let set = WeightedCorrespondenceSet::uniform(pts, target).unwrap();
        match weighted_kabsch(&set) {
            Ok(fit) => {
                prop_assert!((fit.rotation() - t.rotation()).amax() < 1e-7);
                prop_assert!((fit.translation() - t.translation()).amax() < 1e-6);
            }
            Err(e) => prop_assert!(e.is_numerical()),
        }
    }

    #[test]
    fn dbscan_is_permutation_invariant(pts in cloud(150), seed in any::<u64>()) {
        let base = dbscan(&pts, 1.5, 3, 1).unwrap();
        let perm = shuffled(pts.len(), seed);
        let permuted: Vec<Point3> = perm.iter().map(|&i| pts[i]).collect();
        let other = dbscan(&permuted, 1.5, 3, 1).unwrap();
        // Core points and clusters are order independent; a border point
        // reachable from two clusters may switch, so compare core-only views.
        let core: Vec<bool> = pts.iter().map(|p| pts.iter().filter(|q| (*p - **q).norm() <= 1.5).count() >= 3).collect();
        let a: Vec<i32> = perm.iter().map(|&i| if core[i] { base.labels()[i] } else { -1 }).collect();
        let b: Vec<i32> = perm.iter().enumerate().map(|(k, &i)| if core[i] { other.labels()[k] } else { -1 }).collect();
        prop_assert!(same_partition(&a, &b));
    }

    #[test]
    fn flow_metrics_permutation_invariant(
        pairs in prop::collection::vec((point(), point()), 1..100),
        seed in any::<u64>(),
    ) {
        let pred = FlowField::new(pairs.iter().map(|(a, _)| a.coords * 0.1).collect()).unwrap();
        let gt = FlowField::new(pairs.iter().map(|(_, b)| b.coords * 0.1).collect()).unwrap();
        let perm = shuffled(pairs.len(), seed);
        let m1 = flow_metrics(&pred, &gt).unwrap();
        let m2 = flow_metrics(&pred.select(&perm), &gt.select(&perm)).unwrap();
        prop_assert_eq!(m1.acc3ds, m2.acc3ds);
        prop_assert_eq!(m1.acc3dr, m2.acc3dr);
        prop_assert_eq!(m1.outliers, m2.outliers);
        prop_assert_eq!(m1.epe3d_median, m2.epe3d_median);
        prop_assert!((m1.epe3d_mean - m2.epe3d_mean).abs() <= 1e-12 * m1.epe3d_mean.max(1.0));
        prop_assert!(m1.acc3ds <= m1.acc3dr);
    }

    #[test]
    fn flow_metrics_scale_with_the_fields(
        pairs in prop::collection::vec((point(), point()), 1..100),
        c in 0.01..20.0f64,
    ) {
        let pred = FlowField::new(pairs.iter().map(|(a, _)| a.coords * 0.1).collect()).unwrap();
        let gt = FlowField::new(pairs.iter().map(|(_, b)| b.coords * 0.1).collect()).unwrap();
        let scaled = |f: &FlowField| FlowField::new(f.vectors().iter().map(|v| v * c).collect()).unwrap();
        let m1 = flow_metrics(&pred, &gt).unwrap();
        let m2 = flow_metrics(&scaled(&pred), &scaled(&gt)).unwrap();
        prop_assert!((m2.epe3d_mean - c * m1.epe3d_mean).abs() <= 1e-9 * (1.0 + c * m1.epe3d_mean));
        // Threshold metrics follow the per-point rule on the scaled errors.
        let n = pairs.len() as f64;
        let strict = pred.vectors().iter().zip(gt.vectors()).filter(|(p, g)| {
            let e = (*p - *g).norm() * c;
            let gn = g.norm() * c;
            e < 0.05 || (gn > 0.0 && e / gn < 0.05)
        }).count() as f64 / n;
        prop_assert!((m2.acc3ds - strict).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_columns_are_exact_after_last_step(
        rows in 2..12usize,
        cols in 2..12usize,
        seed in any::<u64>(),
        iters in 1..6usize,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 4;
        let fx = FeatureMatrix::new(dim, (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fy = FeatureMatrix::new(dim, (0..cols * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let m = affinity(&fx, &fy, 0.5).unwrap();
        let a = sinkhorn(&add_slack(&m, slack_value(1.0, 0.5)).unwrap(), iters).unwrap();
        for j in 0..cols {
            prop_assert!((a.col_sum(j) - 1.0).abs() < 1e-12);
        }
        prop_assert!(a.values().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
