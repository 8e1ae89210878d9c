//! Scene-flow and ego-motion evaluation metrics.

use crate::error::{Error, Result};
use crate::flowhead::FlowField;
use crate::geom::RigidTransform;

pub const ACC_STRICT_ABS: f64 = 0.05;
pub const ACC_STRICT_REL: f64 = 0.05;
pub const ACC_RELAXED_ABS: f64 = 0.10;
pub const ACC_RELAXED_REL: f64 = 0.10;
pub const OUTLIER_ABS: f64 = 0.30;
pub const OUTLIER_REL: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowMetrics {
    pub epe3d_mean: f64,
    pub epe3d_median: f64,
    pub acc3ds: f64,
    pub acc3dr: f64,
    pub outliers: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EgoMetrics {
    /// Relative rotation error in degrees.
    pub rre: f64,
    /// Relative translation error in meters.
    pub rte: f64,
}

/// End-point error statistics. A zero ground-truth vector has infinite
/// relative error; such points are judged by the absolute thresholds only.
pub fn flow_metrics(pred: &FlowField, gt: &FlowField) -> Result<FlowMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = pred.len() as f64;
    let mut errors = Vec::with_capacity(pred.len());
    let (mut strict, mut relaxed, mut outliers) = (0usize, 0usize, 0usize);
    for (p, g) in pred.vectors().iter().zip(gt.vectors()) {
        let e = (p - g).norm();
        let gn = g.norm();
        let rel = (gn > 0.0).then(|| e / gn);
        if e < ACC_STRICT_ABS || rel.is_some_and(|r| r < ACC_STRICT_REL) {
            strict += 1;
        }
        if e < ACC_RELAXED_ABS || rel.is_some_and(|r| r < ACC_RELAXED_REL) {
            relaxed += 1;
        }
        if e > OUTLIER_ABS || rel.is_some_and(|r| r > OUTLIER_REL) {
            outliers += 1;
        }
        errors.push(e);
    }
    let mean = errors.iter().sum::<f64>() / n;
    errors.sort_unstable_by(f64::total_cmp);
    let mid = errors.len() / 2;
    let median = if errors.len() % 2 == 1 {
        errors[mid]
    } else {
        0.5 * (errors[mid - 1] + errors[mid])
    };
    Ok(FlowMetrics {
        epe3d_mean: mean,
        epe3d_median: median,
        acc3ds: strict as f64 / n,
        acc3dr: relaxed as f64 / n,
        outliers: outliers as f64 / n,
    })
}

/// Geodesic rotation error (degrees) and translation error of `est` against `gt`.
pub fn ego_metrics(est: &RigidTransform, gt: &RigidTransform) -> EgoMetrics {
    let r = gt.rotation().transpose() * est.rotation();
    EgoMetrics {
        rre: rotation_angle(&r).to_degrees(),
        rte: (gt.translation() - est.translation()).norm(),
    }
}

/// Geodesic angle of a rotation matrix. Same value as
/// `acos(clamp((tr R − 1)/2, −1, 1))`, evaluated through `atan2` so that it
/// stays accurate near 0° and 180°.
pub fn rotation_angle(r: &nalgebra::Matrix3<f64>) -> f64 {
    let skew = nalgebra::Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    skew.norm().atan2(r.trace() - 1.0)
}

/// Confusion counts of a binary foreground prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskConfusion {
    pub true_fg: usize,
    pub false_fg: usize,
    pub true_bg: usize,
    pub false_bg: usize,
}

impl MaskConfusion {
    pub fn from_masks(pred_fg: &[bool], gt_fg: &[bool]) -> Result<Self> {
        if pred_fg.len() != gt_fg.len() {
            return Err(Error::LengthMismatch(pred_fg.len(), gt_fg.len()));
        }
        let mut c = Self::default();
        for (&p, &g) in pred_fg.iter().zip(gt_fg) {
            match (p, g) {
                (true, true) => c.true_fg += 1,
                (true, false) => c.false_fg += 1,
                (false, false) => c.true_bg += 1,
                (false, true) => c.false_bg += 1,
            }
        }
        Ok(c)
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            f64::NAN
        } else {
            num as f64 / den as f64
        }
    }

    pub fn precision_fg(&self) -> f64 {
        Self::ratio(self.true_fg, self.true_fg + self.false_fg)
    }

    pub fn recall_fg(&self) -> f64 {
        Self::ratio(self.true_fg, self.true_fg + self.false_bg)
    }

    pub fn precision_bg(&self) -> f64 {
        Self::ratio(self.true_bg, self.true_bg + self.false_bg)
    }

    pub fn recall_bg(&self) -> f64 {
        Self::ratio(self.true_bg, self.true_bg + self.false_fg)
    }
}
