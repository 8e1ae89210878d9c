use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::info;
use rigidflow::pipeline::lift_to_points;
use rigidflow::{
    ego_metrics, energy, flow_metrics, generate_scene, infer_rigid_flow, preprocess, ClusterLabeling, FeatureMatrix,
    FlowField, PipelineConfig, PointCloud, RigidTransform, SceneSpec, NOISE,
};

use crate::args::{EvalArgs, FeatureSource, FlowArgs, MaskSource, SynthArgs};
use crate::config;
use crate::error::{CliError, Result};
use crate::format::{read_cloud, read_transforms, write_cloud, write_transforms};
use crate::report::{ClusterSummary, RunReport};

/// Clearance above `ground_y` for the height mask heuristic, in meters.
pub const HEIGHT_MARGIN: f64 = 0.25;

fn single_transform(path: &Path) -> Result<RigidTransform> {
    let ts = read_transforms(path)?;
    match ts.as_slice() {
        [t] => Ok(*t),
        _ => Err(CliError::Usage(format!("{}: expected one transform, found {}", path.display(), ts.len()))),
    }
}

fn features_from(path: &Path, n: usize) -> Result<FeatureMatrix> {
    let pc = read_cloud(path)?;
    if pc.len() != n {
        return Err(CliError::Usage(format!("{}: {} points, frame has {n}", path.display(), pc.len())));
    }
    let mut pc = pc;
    pc.take_features()
        .ok_or_else(|| CliError::Usage(format!("{}: no feature block", path.display())))
}

fn masks_from(path: &Path, n: usize) -> Result<Vec<f64>> {
    let pc = read_cloud(path)?;
    if pc.len() != n {
        return Err(CliError::Usage(format!("{}: {} points, frame has {n}", path.display(), pc.len())));
    }
    pc.fg_prob()
        .map(<[f64]>::to_vec)
        .ok_or_else(|| CliError::Usage(format!("{}: no fg_prob block", path.display())))
}

fn need<'a>(p: &'a Option<std::path::PathBuf>, flag: &str, mode: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required with {mode}")))
}

fn prepare_frame(
    mut pc: PointCloud,
    path: &Path,
    args: &FlowArgs,
    feature_file: Option<&Path>,
    mask_file: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<PointCloud> {
    let n = pc.len();
    pc = match args.features {
        FeatureSource::Oracle => {
            if pc.features().is_none() {
                return Err(CliError::Usage(format!("{}: no feature block for --features oracle", path.display())));
            }
            pc
        }
        FeatureSource::Xyz => {
            let data = pc.points().iter().flat_map(|p| p.coords.iter().copied().collect::<Vec<_>>()).collect();
            let f = FeatureMatrix::new(3, data)?;
            pc.with_features(f)?
        }
        FeatureSource::File => {
            let f = features_from(feature_file.expect("checked by caller"), n)?;
            pc.with_features(f)?
        }
    };
    pc = match args.masks {
        MaskSource::Oracle => {
            if pc.fg_prob().is_none() {
                return Err(CliError::Usage(format!("{}: no fg_prob block for --masks oracle", path.display())));
            }
            pc
        }
        MaskSource::File => {
            let m = masks_from(mask_file.expect("checked by caller"), n)?;
            pc.with_fg_prob(m)?
        }
        MaskSource::Height => {
            let m = pc
                .points()
                .iter()
                .map(|p| if p.y > cfg.ground_y + HEIGHT_MARGIN { 1.0 } else { 0.0 })
                .collect();
            pc.with_fg_prob(m)?
        }
    };
    Ok(pc)
}

pub fn resolve_config(args: &FlowArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => config::load(p)?,
        None => PipelineConfig::default(),
    };
    config::apply_overrides(&mut cfg, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Dense relabeling of the clusters that still have members.
fn compact(labels: &[i32]) -> ClusterLabeling {
    let mut map = std::collections::BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l != NOISE) {
        let next = map.len() as i32;
        map.entry(l).or_insert(next);
    }
    let dense = labels.iter().map(|l| map.get(l).copied().unwrap_or(NOISE)).collect();
    ClusterLabeling::from_labels(dense).expect("dense labels")
}

pub fn run_flow(args: &FlowArgs) -> Result<RunReport> {
    let cfg = resolve_config(args)?;
    let (src_f, tgt_f) = if args.features == FeatureSource::File {
        (
            Some(need(&args.src_features, "--src-features", "--features file")?),
            Some(need(&args.tgt_features, "--tgt-features", "--features file")?),
        )
    } else {
        (None, None)
    };
    let (src_m, tgt_m) = if args.masks == MaskSource::File {
        (
            Some(need(&args.src_masks, "--src-masks", "--masks file")?),
            Some(need(&args.tgt_masks, "--tgt-masks", "--masks file")?),
        )
    } else {
        (None, None)
    };
    let gt_ego = args.gt_ego.as_deref().map(single_transform).transpose()?;

    let src = read_cloud(&args.src)?;
    let tgt = read_cloud(&args.tgt)?;
    let gt_flow_all = src.flow().map(<[_]>::to_vec);
    let x_in = prepare_frame(src, &args.src, args, src_f, src_m, &cfg)?;
    let y_in = prepare_frame(tgt, &args.tgt, args, tgt_f, tgt_m, &cfg)?;

    let xp = preprocess(&x_in, &cfg)?;
    let yp = preprocess(&y_in, &cfg)?;
    let mut x = xp.cloud;
    x.clear_flow();
    let y = yp.cloud;

    let out = infer_rigid_flow(&x, &y, &cfg, args.refine)?;
    for (stage, ms) in &out.timings {
        info!("{stage}: {ms:.3} ms");
    }

    let lifted = lift_to_points(&out.decomposition, &out.grid_x, &y, cfg.fg_threshold);
    let flow_file = PointCloud::new(x.points().to_vec())?
        .with_cluster_ids(lifted.clusters.labels().to_vec())?
        .with_flow(out.flow.vectors().to_vec())?;
    write_cloud(&args.out, &flow_file)?;

    let mut report = RunReport {
        command: "flow".into(),
        config: config::echo(&cfg).into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        ..Default::default()
    };
    report.info = vec![
        ("refine".into(), args.refine.to_string()),
        ("points_source".into(), x_in.len().to_string()),
        ("points_target".into(), y_in.len().to_string()),
        ("points_retained_source".into(), x.len().to_string()),
        ("points_retained_target".into(), y.len().to_string()),
        ("voxels_source".into(), out.grid_x.len().to_string()),
        ("voxels_target".into(), out.grid_y.len().to_string()),
        ("foreground_voxels".into(), out.fg_indices_x.len().to_string()),
    ];

    if let Some(gt) = &gt_flow_all {
        let gt = FlowField::new(xp.indices.iter().map(|&i| gt[i]).collect())?;
        report.flow = Some(flow_metrics(&out.flow, &gt)?);
    }
    report.ego_transform = Some(out.decomposition.ego);
    if let Some(gt) = &gt_ego {
        report.ego = Some(ego_metrics(&out.decomposition.ego, gt));
    }

    if let (Some(gt_ego), Some(ids_x), Some(ids_y)) = (&gt_ego, x_in.cluster_ids(), y_in.cluster_ids()) {
        let gt_fg_x: Vec<bool> = xp.indices.iter().map(|&i| ids_x[i] >= 0).collect();
        let gt_fg_y: Vec<bool> = yp.indices.iter().map(|&i| ids_y[i] >= 0).collect();
        let pts = x.points();
        let bg_x: Vec<_> = (0..x.len()).filter(|&i| lifted.bg_mask_x[i]).map(|i| pts[i]).collect();
        let fg: Vec<usize> = (0..x.len())
            .filter(|&i| !lifted.bg_mask_x[i] && lifted.fg_prob_x[i] >= cfg.fg_threshold)
            .collect();
        let fg_x: Vec<_> = fg.iter().map(|&i| pts[i]).collect();
        let fg_flow: Vec<_> = fg.iter().map(|&i| out.flow.vectors()[i]).collect();
        let labels: Vec<i32> = fg.iter().map(|&i| lifted.clusters.labels()[i]).collect();
        let clusters = compact(&labels);
        let fg_y: Vec<_> = (0..y.len()).filter(|&i| !lifted.bg_mask_y[i]).map(|i| y.points()[i]).collect();
        let inputs = energy::EnergyInputs {
            fg_prob_x: x.fg_prob().expect("prepared"),
            gt_fg_x: &gt_fg_x,
            fg_prob_y: y.fg_prob().expect("prepared"),
            gt_fg_y: &gt_fg_y,
            bg_x: &bg_x,
            ego_est: &out.decomposition.ego,
            ego_gt: gt_ego,
            assignment: Some(&out.ego_estimate.assignment),
            fg_x: &fg_x,
            fg_flow: &fg_flow,
            clusters: &clusters,
            fg_y: &fg_y,
        };
        report.energy = Some(energy::total_energy(&inputs, &Default::default())?);
    }

    report.clusters = out
        .decomposition
        .cluster_transforms
        .iter()
        .enumerate()
        .map(|(k, t)| ClusterSummary {
            size: lifted.clusters.sizes()[k],
            transform: *t,
            refined: out
                .refinement
                .as_ref()
                .is_some_and(|r| r.clusters.get(k).is_some_and(Option::is_some)),
        })
        .collect();
    if args.timings {
        report.timings = out.timings.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    }
    Ok(report)
}

pub fn scene_spec(args: &SynthArgs) -> SceneSpec {
    let mut spec = SceneSpec::default();
    if let Some(v) = args.objects {
        spec.num_objects = v;
    }
    if let Some(v) = args.points_per_object {
        spec.points_per_object = v;
    }
    if let Some(v) = args.background_points {
        spec.background_points = v;
    }
    if let Some(v) = args.noise {
        spec.noise_sigma = v;
    }
    if let Some(v) = args.dropout {
        spec.dropout = v;
    }
    if let Some(v) = args.max_ego_rotation {
        spec.max_ego_rotation_deg = v;
    }
    if let Some(v) = args.max_ego_translation {
        spec.max_ego_translation = v;
    }
    if let Some(v) = args.max_object_rotation {
        spec.max_object_rotation_deg = v;
    }
    if let Some(v) = args.max_object_translation {
        spec.max_object_translation = v;
    }
    if let Some(v) = args.feature_dim {
        spec.feature_dim = v;
    }
    spec
}

fn mask_prob(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Writes `source.rgf` (features, GT masks, labels and flow), `target.rgf`,
/// `gt_flow.rgf`, `ego.txt` and `objects.txt` into `args.out`.
pub fn run_synth(args: &SynthArgs) -> Result<RunReport> {
    let spec = scene_spec(args);
    let scene = generate_scene(&spec, args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;

    let src = scene
        .frame_x
        .clone()
        .with_fg_prob(mask_prob(&scene.gt_fg_mask_x))?
        .with_flow(scene.gt_flow.vectors().to_vec())?;
    let tgt = scene.frame_y.clone().with_fg_prob(mask_prob(&scene.gt_fg_mask_y))?;
    let gt = PointCloud::new(scene.frame_x.points().to_vec())?.with_flow(scene.gt_flow.vectors().to_vec())?;
    write_cloud(&args.out.join("source.rgf"), &src)?;
    write_cloud(&args.out.join("target.rgf"), &tgt)?;
    write_cloud(&args.out.join("gt_flow.rgf"), &gt)?;
    write_transforms(&args.out.join("ego.txt"), &[scene.gt_ego])?;
    write_transforms(&args.out.join("objects.txt"), &scene.gt_object_transforms)?;

    Ok(RunReport {
        command: "synth".into(),
        info: vec![
            ("seed".into(), args.seed.to_string()),
            ("objects".into(), spec.num_objects.to_string()),
            ("points_source".into(), src.len().to_string()),
            ("points_target".into(), tgt.len().to_string()),
        ],
        ego_transform: Some(scene.gt_ego),
        clusters: scene
            .gt_object_transforms
            .iter()
            .enumerate()
            .map(|(k, t)| ClusterSummary {
                size: scene.gt_labels_x.sizes().get(k).copied().unwrap_or(0),
                transform: Some(*t),
                refined: false,
            })
            .collect(),
        ..Default::default()
    })
}

fn flow_of(path: &Path) -> Result<FlowField> {
    let pc = read_cloud(path)?;
    let v = pc
        .flow()
        .ok_or_else(|| CliError::Usage(format!("{}: no flow block", path.display())))?;
    Ok(FlowField::new(v.to_vec())?)
}

pub fn run_eval(args: &EvalArgs) -> Result<RunReport> {
    let pred = flow_of(&args.pred)?;
    let gt = flow_of(&args.gt)?;
    if pred.len() != gt.len() {
        return Err(CliError::Usage(format!(
            "{} has {} vectors but {} has {}",
            args.pred.display(),
            pred.len(),
            args.gt.display(),
            gt.len()
        )));
    }
    let mut report = RunReport {
        command: "eval".into(),
        info: vec![("points".into(), pred.len().to_string())],
        flow: Some(flow_metrics(&pred, &gt)?),
        ..Default::default()
    };
    if let (Some(p), Some(g)) = (&args.pred_ego, &args.gt_ego) {
        let est = single_transform(p)?;
        report.ego_transform = Some(est);
        report.ego = Some(ego_metrics(&est, &single_transform(g)?));
    }
    Ok(report)
}

/// Writes the report to `path`, or to stdout.
pub fn emit(report: &RunReport, path: Option<&Path>) -> Result<()> {
    let text = report.to_text();
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}
