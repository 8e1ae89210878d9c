//! End-to-end inference: masks, ego-motion, clustering, per-cluster fits,
//! rigid flow assembly, optional refinement and transfer back to points.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{dbscan, ClusterLabeling};
use crate::error::{Error, Result};
use crate::flowhead::{smooth_flow, soft_flow_detailed, FlowField};
use crate::geom::{transfer_flow_to_points, voxelize, Point3, PointCloud, RigidTransform, Vector3, VoxelGrid};
use crate::refine::{refine_scene, IcpConfig, RefineConfig, RefineReport};
use crate::rigidfit::{estimate_ego_motion, fit_cluster_transform, fit_cluster_transform_weighted, EgoEstimate, EgoParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub voxel_size: f64,
    pub max_points: usize,
    pub range_cutoff: f64,
    pub ground_removal: bool,
    /// Points with `y` at or below this are dropped when `ground_removal` is set.
    pub ground_y: f64,
    pub fg_threshold: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_samples: usize,
    pub min_cluster_size: usize,
    pub tau_ego: f64,
    pub tau_flow: f64,
    pub slack_d0: f64,
    pub sinkhorn_iterations: usize,
    pub ego_samples: usize,
    pub icp_background: IcpConfig,
    pub icp_object: IcpConfig,
    pub min_points_for_icp: usize,
    /// Neighbors used when moving voxel flow back onto points.
    pub idw_k: usize,
    /// k-NN mean smoothing of the soft flow; 0 disables it.
    pub smooth_k: usize,
    pub smooth_radius: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.1,
            max_points: 8192,
            range_cutoff: 35.0,
            ground_removal: false,
            ground_y: -1.4,
            fg_threshold: 0.5,
            dbscan_eps: 0.75,
            dbscan_min_samples: 5,
            min_cluster_size: 10,
            tau_ego: 0.1,
            tau_flow: 0.1,
            slack_d0: 0.2,
            sinkhorn_iterations: 3,
            ego_samples: 1024,
            icp_background: IcpConfig::background(),
            icp_object: IcpConfig::object(),
            min_points_for_icp: 10,
            idw_k: 3,
            smooth_k: 0,
            smooth_radius: 0.5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("voxel_size", self.voxel_size),
            ("range_cutoff", self.range_cutoff),
            ("dbscan_eps", self.dbscan_eps),
            ("tau_ego", self.tau_ego),
            ("tau_flow", self.tau_flow),
            ("slack_d0", self.slack_d0),
            ("smooth_radius", self.smooth_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        let counts = [
            ("max_points", self.max_points),
            ("dbscan_min_samples", self.dbscan_min_samples),
            ("sinkhorn_iterations", self.sinkhorn_iterations),
            ("idw_k", self.idw_k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::param(name, "must be at least 1"));
            }
        }
        if self.ego_samples < 3 {
            return Err(Error::param("ego_samples", "must be at least 3"));
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return Err(Error::param("fg_threshold", "must lie in (0, 1)"));
        }
        if !self.ground_y.is_finite() {
            return Err(Error::param("ground_y", "must be finite"));
        }
        self.icp_background.validate()?;
        self.icp_object.validate()
    }

    pub fn ego_params(&self) -> EgoParams {
        EgoParams {
            tau: self.tau_ego,
            n_sample: self.ego_samples,
            slack_distance: self.slack_d0,
            iterations: self.sinkhorn_iterations,
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            background: self.icp_background,
            object: self.icp_object,
            min_points: self.min_points_for_icp,
        }
    }
}

/// Masks, clustering and rigid transforms of one frame pair, all indexed
/// over the voxels of the source frame (and of the target for `*_y`).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDecomposition {
    pub fg_prob_x: Vec<f64>,
    pub fg_prob_y: Vec<f64>,
    pub bg_mask_x: Vec<bool>,
    pub bg_mask_y: Vec<bool>,
    /// Cluster ids over all source points; background points are noise.
    pub clusters: ClusterLabeling,
    pub ego: RigidTransform,
    /// One entry per cluster; `None` when the cluster could not be fit.
    pub cluster_transforms: Vec<Option<RigidTransform>>,
}

impl SceneDecomposition {
    /// Every rigid segment as (member indices, transform): the background
    /// first, then each fitted cluster.
    pub fn segments(&self) -> Vec<(Vec<usize>, RigidTransform)> {
        let bg = self
            .bg_mask_x
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        let mut out = vec![(bg, self.ego)];
        for (k, t) in self.cluster_transforms.iter().enumerate() {
            if let Some(t) = t {
                out.push((self.clusters.members(k), *t));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub cloud: PointCloud,
    /// Index into the input of every retained point, ascending.
    pub indices: Vec<usize>,
}

/// Range cutoff, optional ground removal and seeded subsampling, drawing the
/// subsample from `cfg.seed`.
pub fn preprocess(pc: &PointCloud, cfg: &PipelineConfig) -> Result<Preprocessed> {
    preprocess_with_rng(pc, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub fn preprocess_with_rng<R: Rng + ?Sized>(pc: &PointCloud, cfg: &PipelineConfig, rng: &mut R) -> Result<Preprocessed> {
    cfg.validate()?;
    let mut indices: Vec<usize> = pc
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.coords.norm() <= cfg.range_cutoff)
        .filter(|(_, p)| !cfg.ground_removal || p.y > cfg.ground_y)
        .map(|(i, _)| i)
        .collect();
    if indices.len() > cfg.max_points {
        let mut keep = rand::seq::index::sample(rng, indices.len(), cfg.max_points).into_vec();
        keep.sort_unstable();
        indices = keep.into_iter().map(|k| indices[k]).collect();
    }
    if indices.len() < 3 {
        return Err(Error::InsufficientPoints(indices.len()));
    }
    Ok(Preprocessed {
        cloud: pc.select(&indices),
        indices,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Final decomposition (refined when refinement ran).
    pub decomposition: SceneDecomposition,
    /// Decomposition before refinement.
    pub initial: SceneDecomposition,
    pub grid_x: VoxelGrid,
    pub grid_y: VoxelGrid,
    /// Source voxels that passed the foreground threshold, ascending.
    pub fg_indices_x: Vec<usize>,
    /// Unconstrained soft flow of the foreground voxels, in `fg_indices_x` order.
    pub soft_flow: FlowField,
    /// Rigid flow of every source voxel.
    pub voxel_flow: FlowField,
    /// Rigid flow of every input source point.
    pub flow: FlowField,
    pub ego_estimate: EgoEstimate,
    pub refinement: Option<RefineReport>,
    /// Wall-clock milliseconds per stage, in execution order.
    pub timings: Vec<(&'static str, f64)>,
}

fn mask_indices(mask: &[bool], want: bool) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b == want).map(|(i, _)| i).collect()
}

/// Per-point flow from a decomposition: segment transforms where a point
/// belongs to a fitted segment, `fallback` elsewhere.
pub fn assemble_rigid_flow(decomp: &SceneDecomposition, points: &[Point3], fallback: &[Vector3]) -> Result<FlowField> {
    if points.len() != decomp.bg_mask_x.len() {
        return Err(Error::LengthMismatch(points.len(), decomp.bg_mask_x.len()));
    }
    if fallback.len() != points.len() {
        return Err(Error::LengthMismatch(fallback.len(), points.len()));
    }
    let mut flow = fallback.to_vec();
    for (members, t) in decomp.segments() {
        for i in members {
            flow[i] = t.flow_at(&points[i]);
        }
    }
    FlowField::new(flow)
}

/// Runs the full inference on a frame pair carrying features and
/// foreground probabilities.
pub fn infer_rigid_flow(x: &PointCloud, y: &PointCloud, cfg: &PipelineConfig, refine: bool) -> Result<PipelineOutput> {
    cfg.validate()?;
    for pc in [x, y] {
        if pc.is_empty() {
            return Err(Error::EmptyCloud);
        }
        pc.features().ok_or(Error::MissingAttribute("features"))?;
        pc.fg_prob().ok_or(Error::MissingAttribute("fg_prob"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, timings: &mut Vec<(&'static str, f64)>| {
        timings.push((name, clock.elapsed().as_secs_f64() * 1e3));
        clock = Instant::now();
    };

    let grid_x = voxelize(x, cfg.voxel_size, cfg.max_points, &mut rng)?;
    let grid_y = voxelize(y, cfg.voxel_size, cfg.max_points, &mut rng)?;
    let vx = grid_x.centers();
    let vy = grid_y.centers();
    let fg_prob_x = vx.fg_prob().expect("voxelized fg_prob").to_vec();
    let fg_prob_y = vy.fg_prob().expect("voxelized fg_prob").to_vec();
    let bg_mask_x: Vec<bool> = fg_prob_x.iter().map(|&p| p < cfg.fg_threshold).collect();
    let bg_mask_y: Vec<bool> = fg_prob_y.iter().map(|&p| p < cfg.fg_threshold).collect();
    lap("voxelize", &mut timings);

    let bg_x = mask_indices(&bg_mask_x, true);
    let bg_y = mask_indices(&bg_mask_y, true);
    if bg_x.len() < 3 || bg_y.len() < 3 {
        return Err(Error::NoBackground);
    }
    let ego_estimate = estimate_ego_motion(&vx.select(&bg_x), &vy.select(&bg_y), &cfg.ego_params(), &mut rng)?;
    lap("ego", &mut timings);

    let fg_x = mask_indices(&bg_mask_x, false);
    let fg_cloud_x = vx.select(&fg_x);
    let fg_labels = dbscan(fg_cloud_x.points(), cfg.dbscan_eps, cfg.dbscan_min_samples, cfg.min_cluster_size)?;
    let clusters = fg_labels.scatter(&fg_x, vx.len());
    lap("cluster", &mut timings);

    let (soft_flow, confidence) = if fg_x.is_empty() {
        (FlowField::zeros(0), Vec::new())
    } else {
        let sf = soft_flow_detailed(&fg_cloud_x, vy, cfg.tau_flow)?;
        let flow = if cfg.smooth_k > 0 {
            smooth_flow(&fg_cloud_x, &sf.flow, cfg.smooth_k, cfg.smooth_radius)?
        } else {
            sf.flow
        };
        (flow, sf.best_feature_distance)
    };
    lap("soft_flow", &mut timings);

    let cluster_transforms = (0..fg_labels.num_clusters())
        .map(|k| fit_from_soft_flow(&fg_labels.members(k), fg_cloud_x.points(), soft_flow.vectors(), &confidence, cfg.tau_flow))
        .collect::<Result<Vec<_>>>()?;
    lap("fit", &mut timings);

    let initial = SceneDecomposition {
        fg_prob_x,
        fg_prob_y,
        bg_mask_x,
        bg_mask_y,
        clusters,
        ego: ego_estimate.transform,
        cluster_transforms,
    };

    let (decomposition, refinement) = if refine {
        let lifted = lift_to_points(&initial, &grid_x, y, cfg.fg_threshold);
        let (refined, r) = refine_scene(&lifted, x, y, &cfg.refine_config())?;
        let mut d = initial.clone();
        d.ego = refined.ego;
        d.cluster_transforms = refined.cluster_transforms;
        (d, Some(r))
    } else {
        (initial.clone(), None)
    };
    lap("refine", &mut timings);

    let mut fallback = vec![Vector3::zeros(); vx.len()];
    for (&i, v) in fg_x.iter().zip(soft_flow.vectors()) {
        fallback[i] = *v;
    }
    let voxel_flow = assemble_rigid_flow(&decomposition, vx.points(), &fallback)?;
    let flow = transfer_flow_to_points(&grid_x, &voxel_flow, x, cfg.idw_k)?;
    lap("transfer", &mut timings);

    Ok(PipelineOutput {
        decomposition,
        initial,
        grid_x,
        grid_y,
        fg_indices_x: fg_x,
        soft_flow,
        voxel_flow,
        flow,
        ego_estimate,
        refinement,
        timings,
    })
}

/// The voxel-level decomposition restated over the original points, so that
/// refinement runs on measured coordinates rather than voxel centroids.
/// Source points inherit the mask and label of their voxel; points of a
/// dropped voxel belong to no segment. Target points are thresholded
/// individually.
pub fn lift_to_points(decomp: &SceneDecomposition, grid_x: &VoxelGrid, y: &PointCloud, fg_threshold: f64) -> SceneDecomposition {
    let voxel_of = grid_x.point_to_voxel();
    let bg_mask_x: Vec<bool> = voxel_of.iter().map(|v| v.is_some_and(|v| decomp.bg_mask_x[v])).collect();
    let labels: Vec<i32> = voxel_of
        .iter()
        .map(|v| v.map_or(crate::cluster::NOISE, |v| decomp.clusters.labels()[v]))
        .collect();
    let fg_prob_x = voxel_of.iter().map(|v| v.map_or(0.0, |v| decomp.fg_prob_x[v])).collect();
    let fg_prob_y: Vec<f64> = y.fg_prob().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; y.len()]);
    SceneDecomposition {
        fg_prob_x,
        bg_mask_y: fg_prob_y.iter().map(|&p| p < fg_threshold).collect(),
        fg_prob_y,
        bg_mask_x,
        clusters: ClusterLabeling::from_labels_unchecked(labels, decomp.clusters.num_clusters()),
        ego: decomp.ego,
        cluster_transforms: decomp.cluster_transforms.clone(),
    }
}

/// Cluster transform from the soft flow of its members. Members are weighted
/// by how well their best feature match compares to the cluster's best one,
/// which discounts points whose counterpart is missing from the target.
fn fit_from_soft_flow(
    members: &[usize],
    points: &[Point3],
    flow: &[Vector3],
    best_distance: &[f64],
    tau: f64,
) -> Result<Option<RigidTransform>> {
    if members.len() < 3 {
        return Ok(None);
    }
    let pts: Vec<Point3> = members.iter().map(|&i| points[i]).collect();
    let v: Vec<Vector3> = members.iter().map(|&i| flow[i]).collect();
    let d_min = members.iter().map(|&i| best_distance[i]).fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = members.iter().map(|&i| (-(best_distance[i] - d_min) / tau).exp()).collect();
    match fit_cluster_transform_weighted(&pts, &v, &w) {
        Ok(t) => Ok(Some(t)),
        Err(e) if e.is_numerical() || matches!(e, Error::InsufficientPoints(_)) => match fit_cluster_transform(&pts, &v) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.is_numerical() || matches!(e, Error::InsufficientPoints(_)) => Ok(None),
            Err(e) => Err(e),
        },
        Err(e) => Err(e),
    }
}
