//! Synthetic multi-body scenes with exact ground truth.
//!
//! The world is y-up: a ground disk with a few vertical walls as background,
//! and box-shaped objects standing on the ground as foreground.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::cluster::{ClusterLabeling, NOISE};
use crate::error::{Error, Result};
use crate::flowhead::FlowField;
use crate::geom::{FeatureMatrix, Point3, PointCloud, RigidTransform, Vector3};

/// Height of the ground plane.
pub const GROUND_Y: f64 = -1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub num_objects: usize,
    pub points_per_object: usize,
    pub background_points: usize,
    /// Radius of the ground disk in meters.
    pub background_extent: f64,
    pub num_walls: usize,
    pub max_ego_rotation_deg: f64,
    pub max_ego_translation: f64,
    pub max_object_rotation_deg: f64,
    pub max_object_translation: f64,
    pub noise_sigma: f64,
    /// Fraction of points dropped, independently in each frame.
    pub dropout: f64,
    /// Minimum clearance between object footprints.
    pub min_gap: f64,
    pub feature_dim: usize,
    /// Replaces the random ego-motion.
    pub ego_override: Option<RigidTransform>,
    /// Replaces the random object motions, given in world coordinates
    /// before ego-motion is applied.
    pub object_motion_override: Option<Vec<RigidTransform>>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_objects: 3,
            points_per_object: 200,
            background_points: 2000,
            background_extent: 25.0,
            num_walls: 3,
            max_ego_rotation_deg: 5.0,
            max_ego_translation: 2.0,
            max_object_rotation_deg: 10.0,
            max_object_translation: 3.0,
            noise_sigma: 0.005,
            dropout: 0.1,
            min_gap: 1.5,
            feature_dim: 16,
            ego_override: None,
            object_motion_override: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSceneSpec(m));
        if self.num_objects > 0 && self.points_per_object < 3 {
            return bad(format!("{} points per object, need at least 3", self.points_per_object));
        }
        if self.background_points < 3 {
            return bad(format!("{} background points, need at least 3", self.background_points));
        }
        if !(self.background_extent >= 8.0 && self.background_extent.is_finite()) {
            return bad("background extent must be at least 8 m".into());
        }
        let non_negative = [
            ("max_ego_rotation_deg", self.max_ego_rotation_deg),
            ("max_ego_translation", self.max_ego_translation),
            ("max_object_rotation_deg", self.max_object_rotation_deg),
            ("max_object_translation", self.max_object_translation),
            ("noise_sigma", self.noise_sigma),
            ("min_gap", self.min_gap),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        if let Some(m) = &self.object_motion_override {
            if m.len() != self.num_objects {
                return bad(format!("{} object motions for {} objects", m.len(), self.num_objects));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Source frame with oracle features and ground-truth cluster ids.
    pub frame_x: PointCloud,
    /// Target frame with oracle features and ground-truth cluster ids.
    pub frame_y: PointCloud,
    pub gt_flow: FlowField,
    pub gt_ego: RigidTransform,
    /// Apparent transform of each object, ego-motion included.
    pub gt_object_transforms: Vec<RigidTransform>,
    pub gt_fg_mask_x: Vec<bool>,
    pub gt_fg_mask_y: Vec<bool>,
    pub gt_labels_x: ClusterLabeling,
    pub gt_labels_y: ClusterLabeling,
    /// Target index of each source point whose counterpart survived dropout.
    pub correspondence_map: Vec<Option<usize>>,
}

struct BoxObject {
    center: Point3,
    half: Vector3,
    yaw: f64,
}

impl BoxObject {
    fn footprint_radius(&self) -> f64 {
        self.half.x.hypot(self.half.z)
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Point3 {
        let h = self.half;
        let areas = [h.y * h.z, h.y * h.z, h.x * h.z, h.x * h.z, h.x * h.y, h.x * h.y];
        let total: f64 = areas.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0;
        while face < 5 && pick >= areas[face] {
            pick -= areas[face];
            face += 1;
        }
        let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
        let local = match face / 2 {
            0 => Vector3::new(sign * h.x, u * h.y, v * h.z),
            1 => Vector3::new(u * h.x, sign * h.y, v * h.z),
            _ => Vector3::new(u * h.x, v * h.y, sign * h.z),
        };
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), self.yaw);
        self.center + rot * local
    }
}

fn random_transform(rng: &mut ChaCha8Rng, max_deg: f64, max_translation: f64) -> RigidTransform {
    let axis = Vector3::from(UnitSphere.sample(rng));
    let angle = rng.random_range(0.0..=max_deg).to_radians();
    let dir = Vector3::from(UnitSphere.sample(rng));
    RigidTransform::from_axis_angle(&axis, angle, dir * rng.random_range(0.0..=max_translation))
}

/// Yaw about the object's vertical axis followed by a horizontal shift.
fn object_motion(rng: &mut ChaCha8Rng, center: &Point3, max_deg: f64, max_translation: f64) -> RigidTransform {
    let yaw = rng.random_range(-max_deg..=max_deg).to_radians();
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let shift = Vector3::new(heading.cos(), 0.0, heading.sin()) * rng.random_range(0.0..=max_translation);
    let to_origin = RigidTransform::from_translation(-center.coords);
    let spin = RigidTransform::from_axis_angle(&Vector3::y(), yaw, center.coords + shift);
    spin.compose(&to_origin)
}

fn place_objects(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Vec<BoxObject>> {
    let mut objects: Vec<BoxObject> = Vec::with_capacity(spec.num_objects);
    let r_max = 0.6 * spec.background_extent;
    for k in 0..spec.num_objects {
        let mut placed = false;
        for _ in 0..1000 {
            let half = Vector3::new(
                rng.random_range(0.75..1.75),
                rng.random_range(0.4..0.75),
                rng.random_range(0.5..0.9),
            );
            let r = rng.random_range(4.0..r_max);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let candidate = BoxObject {
                center: Point3::new(r * phi.cos(), GROUND_Y + 0.1 + half.y, r * phi.sin()),
                half,
                yaw: rng.random_range(0.0..std::f64::consts::PI),
            };
            let clear = objects.iter().all(|o| {
                let d = (o.center.xz() - candidate.center.xz()).norm();
                d >= o.footprint_radius() + candidate.footprint_radius() + spec.min_gap
            });
            if clear {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidSceneSpec(format!(
                "could not place object {k} with a {} m gap",
                spec.min_gap
            )));
        }
    }
    Ok(objects)
}

fn background_point(rng: &mut ChaCha8Rng, spec: &SceneSpec, walls: &[(Point3, Vector3, f64)]) -> Point3 {
    if walls.is_empty() || rng.random::<f64>() < 0.7 {
        let r = spec.background_extent * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        Point3::new(r * phi.cos(), GROUND_Y, r * phi.sin())
    } else {
        let (start, dir, len) = walls[rng.random_range(0..walls.len())];
        start + dir * rng.random_range(0.0..len) + Vector3::y() * rng.random_range(0.0..3.0)
    }
}

/// Draws a scene from `spec`. Everything is determined by `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let walls: Vec<(Point3, Vector3, f64)> = (0..spec.num_walls)
        .map(|_| {
            let r = rng.random_range(0.7..0.95) * spec.background_extent;
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(8.0..15.0);
            let dir = Vector3::new(-phi.sin(), 0.0, phi.cos());
            let start = Point3::new(r * phi.cos(), GROUND_Y, r * phi.sin()) - dir * (len / 2.0);
            (start, dir, len)
        })
        .collect();
    let objects = place_objects(&mut rng, spec)?;

    let gt_ego = match spec.ego_override {
        Some(t) => t,
        None => random_transform(&mut rng, spec.max_ego_rotation_deg, spec.max_ego_translation),
    };
    let motions: Vec<RigidTransform> = match &spec.object_motion_override {
        Some(m) => m.clone(),
        None => objects
            .iter()
            .map(|o| object_motion(&mut rng, &o.center, spec.max_object_rotation_deg, spec.max_object_translation))
            .collect(),
    };
    let gt_object_transforms: Vec<RigidTransform> = motions.iter().map(|m| gt_ego.compose(m)).collect();

    // Base points with their segment: -1 for background, k for object k.
    let mut base: Vec<(Point3, i32)> = (0..spec.background_points)
        .map(|_| (background_point(&mut rng, spec, &walls), NOISE))
        .collect();
    for (k, o) in objects.iter().enumerate() {
        base.extend((0..spec.points_per_object).map(|_| (o.sample_surface(&mut rng), k as i32)));
    }
    let segment_transform = |label: i32| {
        if label < 0 {
            gt_ego
        } else {
            gt_object_transforms[label as usize]
        }
    };

    let keep_x: Vec<bool> = base.iter().map(|_| rng.random::<f64>() >= spec.dropout).collect();
    let keep_y: Vec<bool> = base.iter().map(|_| rng.random::<f64>() >= spec.dropout).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let feature = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..spec.feature_dim).map(|_| normal.sample(rng)).collect() };
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidSceneSpec(e.to_string()))?;

    let (mut xs, mut fx, mut lx, mut flow) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut ys, mut fy, mut ly) = (Vec::new(), Vec::new(), Vec::new());
    let mut correspondence_map = Vec::new();
    for (i, &(p, label)) in base.iter().enumerate() {
        let t = segment_transform(label);
        let shared = feature(&mut rng);
        let paired = keep_x[i] && keep_y[i];
        if keep_x[i] {
            xs.push(p);
            lx.push(label);
            flow.push(t.flow_at(&p));
            fx.extend(if paired { shared.clone() } else { feature(&mut rng) });
            correspondence_map.push(paired.then_some(ys.len()));
        }
        if keep_y[i] {
            let jitter = if spec.noise_sigma > 0.0 {
                Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                Vector3::zeros()
            };
            ys.push(t.transform_point(&p) + jitter);
            ly.push(label);
            fy.extend(if paired { shared } else { feature(&mut rng) });
        }
    }

    let frame_x = PointCloud::new(xs)?
        .with_features(FeatureMatrix::new(spec.feature_dim, fx)?)?
        .with_cluster_ids(lx.clone())?;
    let frame_y = PointCloud::new(ys)?
        .with_features(FeatureMatrix::new(spec.feature_dim, fy)?)?
        .with_cluster_ids(ly.clone())?;
    Ok(SyntheticScene {
        frame_x,
        frame_y,
        gt_flow: FlowField::new(flow)?,
        gt_ego,
        gt_object_transforms,
        gt_fg_mask_x: lx.iter().map(|&l| l >= 0).collect(),
        gt_fg_mask_y: ly.iter().map(|&l| l >= 0).collect(),
        gt_labels_x: labeling(lx)?,
        gt_labels_y: labeling(ly)?,
        correspondence_map,
    })
}

/// Labels with ids of objects that lost every point compacted away.
fn labeling(mut labels: Vec<i32>) -> Result<ClusterLabeling> {
    let k = labels.iter().copied().max().unwrap_or(NOISE).max(NOISE) + 1;
    let mut seen = vec![false; k as usize];
    for &l in labels.iter().filter(|&&l| l >= 0) {
        seen[l as usize] = true;
    }
    if seen.iter().all(|&s| s) {
        return ClusterLabeling::from_labels(labels);
    }
    let mut remap = vec![NOISE; k as usize];
    let mut next = 0;
    for (old, &s) in seen.iter().enumerate() {
        if s {
            remap[old] = next;
            next += 1;
        }
    }
    for l in labels.iter_mut().filter(|l| **l >= 0) {
        *l = remap[*l as usize];
    }
    ClusterLabeling::from_labels(labels)
}
