//! Flat `key = value` configuration for [`PipelineConfig`].

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rigidflow::PipelineConfig;

use crate::error::{CliError, Result};

pub const KEYS: &[&str] = &[
    "voxel_size",
    "max_points",
    "range_cutoff",
    "ground_removal",
    "ground_y",
    "fg_threshold",
    "dbscan_eps",
    "dbscan_min_samples",
    "min_cluster_size",
    "tau_ego",
    "tau_flow",
    "slack_d0",
    "sinkhorn_iterations",
    "ego_samples",
    "icp_background.max_correspondence_distance",
    "icp_background.max_iterations",
    "icp_background.convergence_epsilon",
    "icp_object.max_correspondence_distance",
    "icp_object.max_iterations",
    "icp_object.convergence_epsilon",
    "min_points_for_icp",
    "idw_k",
    "smooth_k",
    "smooth_radius",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key}: cannot parse `{value}`: {e}"))
}

/// Sets one field by name.
pub fn set(cfg: &mut PipelineConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let v = value.trim();
    match key {
        "voxel_size" => cfg.voxel_size = parse(key, v)?,
        "max_points" => cfg.max_points = parse(key, v)?,
        "range_cutoff" => cfg.range_cutoff = parse(key, v)?,
        "ground_removal" => cfg.ground_removal = parse(key, v)?,
        "ground_y" => cfg.ground_y = parse(key, v)?,
        "fg_threshold" => cfg.fg_threshold = parse(key, v)?,
        "dbscan_eps" => cfg.dbscan_eps = parse(key, v)?,
        "dbscan_min_samples" => cfg.dbscan_min_samples = parse(key, v)?,
        "min_cluster_size" => cfg.min_cluster_size = parse(key, v)?,
        "tau_ego" => cfg.tau_ego = parse(key, v)?,
        "tau_flow" => cfg.tau_flow = parse(key, v)?,
        "slack_d0" => cfg.slack_d0 = parse(key, v)?,
        "sinkhorn_iterations" => cfg.sinkhorn_iterations = parse(key, v)?,
        "ego_samples" => cfg.ego_samples = parse(key, v)?,
        "icp_background.max_correspondence_distance" => cfg.icp_background.max_correspondence_distance = parse(key, v)?,
        "icp_background.max_iterations" => cfg.icp_background.max_iterations = parse(key, v)?,
        "icp_background.convergence_epsilon" => cfg.icp_background.convergence_epsilon = parse(key, v)?,
        "icp_object.max_correspondence_distance" => cfg.icp_object.max_correspondence_distance = parse(key, v)?,
        "icp_object.max_iterations" => cfg.icp_object.max_iterations = parse(key, v)?,
        "icp_object.convergence_epsilon" => cfg.icp_object.convergence_epsilon = parse(key, v)?,
        "min_points_for_icp" => cfg.min_points_for_icp = parse(key, v)?,
        "idw_k" => cfg.idw_k = parse(key, v)?,
        "smooth_k" => cfg.smooth_k = parse(key, v)?,
        "smooth_radius" => cfg.smooth_radius = parse(key, v)?,
        "seed" => cfg.seed = parse(key, v)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

/// Every field as `(key, value)` in [`KEYS`] order.
pub fn echo(cfg: &PipelineConfig) -> Vec<(&'static str, String)> {
    let values = [
        cfg.voxel_size.to_string(),
        cfg.max_points.to_string(),
        cfg.range_cutoff.to_string(),
        cfg.ground_removal.to_string(),
        cfg.ground_y.to_string(),
        cfg.fg_threshold.to_string(),
        cfg.dbscan_eps.to_string(),
        cfg.dbscan_min_samples.to_string(),
        cfg.min_cluster_size.to_string(),
        cfg.tau_ego.to_string(),
        cfg.tau_flow.to_string(),
        cfg.slack_d0.to_string(),
        cfg.sinkhorn_iterations.to_string(),
        cfg.ego_samples.to_string(),
        cfg.icp_background.max_correspondence_distance.to_string(),
        cfg.icp_background.max_iterations.to_string(),
        cfg.icp_background.convergence_epsilon.to_string(),
        cfg.icp_object.max_correspondence_distance.to_string(),
        cfg.icp_object.max_iterations.to_string(),
        cfg.icp_object.convergence_epsilon.to_string(),
        cfg.min_points_for_icp.to_string(),
        cfg.idw_k.to_string(),
        cfg.smooth_k.to_string(),
        cfg.smooth_radius.to_string(),
        cfg.seed.to_string(),
    ];
    KEYS.iter().copied().zip(values).collect()
}

/// Applies a config text on top of `cfg`. Blank lines and `#` comments are
/// ignored.
pub fn apply_text(cfg: &mut PipelineConfig, path: &Path, text: &str) -> Result<()> {
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CliError::Parse {
            path: path.to_path_buf(),
            line: no + 1,
            message,
        };
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
        set(cfg, k.trim(), v).map_err(err)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = PipelineConfig::default();
    apply_text(&mut cfg, path, &text)?;
    Ok(cfg)
}

/// `key=value` overrides given on the command line.
pub fn apply_overrides(cfg: &mut PipelineConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{o}`")))?;
        set(cfg, k.trim(), v).map_err(CliError::Usage)?;
    }
    Ok(())
}
