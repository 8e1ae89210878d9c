//! Rigid multi-body scene flow between two point clouds.
//!
//! Background motion is estimated from Sinkhorn soft correspondences and a
//! weighted Kabsch fit. Foreground points are split into rigid bodies with
//! DBSCAN, and each body gets its own transform. Optional point-to-point ICP
//! refines every transform against the target frame.

pub mod cluster;
pub mod energy;
pub mod error;
pub mod flowhead;
pub mod geom;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod rigidfit;
mod spatial;
pub mod synthetic;
pub mod transport;

pub use cluster::{dbscan, ClusterLabeling, NOISE};
pub use energy::{total_energy, EnergyBreakdown, EnergyInputs, EnergyWeights};
pub use error::{Error, Result};
pub use flowhead::{soft_flow, FlowField};
pub use geom::{
    apply_transform, compose, invert, transfer_flow_to_points, voxelize, FeatureMatrix, Point3, PointCloud,
    RigidTransform, Vector3, VoxelGrid,
};
pub use metrics::{ego_metrics, flow_metrics, EgoMetrics, FlowMetrics};
pub use pipeline::{infer_rigid_flow, preprocess, PipelineConfig, PipelineOutput, SceneDecomposition};
pub use refine::{icp_refine, refine_scene, IcpConfig, IcpResult, IcpStatus};
pub use rigidfit::{estimate_ego_motion, fit_cluster_transform, weighted_kabsch, WeightedCorrespondenceSet};
pub use synthetic::{generate_scene, SceneSpec, SyntheticScene};
