//! Pose accuracy metrics: 2D projection error, ADD / ADD-S and the area
//! under the ADD accuracy–threshold curve.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{project, CameraIntrinsics, GeometryError, Pose};

/// A pose passes the 2D projection metric below this mean error.
pub const PROJ2D_THRESHOLD_PX: f64 = 5.0;
/// A pose passes ADD(-S) below this fraction of the model diameter.
pub const ADD_DIAMETER_FRACTION: f64 = 0.1;
/// Default AUC integration limit, meters.
pub const DEFAULT_AUC_MAX_THRESHOLD: f64 = 0.1;
/// Above this many model points ADD-S queries a k-d tree.
pub const EXACT_ADDS_LIMIT: usize = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "ADD")]
    Add,
    #[serde(rename = "ADD-S")]
    AddS,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Add => "ADD",
            MetricKind::AddS => "ADD-S",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proj2dMetric {
    /// Mean projected-point distance, pixels.
    pub error: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AddMetric {
    /// Mean 3D point distance, model units.
    pub value: f64,
    pub correct: bool,
    pub kind: MetricKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub proj2d: Proj2dMetric,
    pub add: AddMetric,
}

pub fn metric_2d_projection(
    est: &Pose,
    gt: &Pose,
    points: &[Vector3<f64>],
    intr: &CameraIntrinsics,
) -> Result<Proj2dMetric, GeometryError> {
    let mut total = 0.0;
    for x in points {
        total += (project(intr, est, x)? - project(intr, gt, x)?).norm();
    }
    let error = total / points.len() as f64;
    Ok(Proj2dMetric {
        error,
        correct: error < PROJ2D_THRESHOLD_PX,
    })
}

/// Mean distance between corresponding transformed points.
pub fn add_value(est: &Pose, gt: &Pose, points: &[Vector3<f64>]) -> f64 {
    let total: f64 = points
        .iter()
        .map(|x| (est.transform_point(x) - gt.transform_point(x)).norm())
        .sum();
    total / points.len() as f64
}

/// Mean over estimated points of the distance to the closest ground-truth
/// point. Not symmetric in its pose arguments.
pub fn adds_value(est: &Pose, gt: &Pose, points: &[Vector3<f64>]) -> f64 {
    let gt_pts: Vec<Vector3<f64>> = points.iter().map(|x| gt.transform_point(x)).collect();
    let est_pts: Vec<Vector3<f64>> = points.iter().map(|x| est.transform_point(x)).collect();
    let dists: Vec<f64> = if points.len() <= EXACT_ADDS_LIMIT {
        est_pts
            .par_iter()
            .map(|p| {
                gt_pts
                    .iter()
                    .map(|q| (p - q).norm_squared())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    } else {
        let coords: Vec<[f64; 3]> = gt_pts.iter().map(|q| [q.x, q.y, q.z]).collect();
        let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&coords);
        est_pts
            .par_iter()
            .map(|p| tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]).distance.sqrt())
            .collect()
    };
    dists.iter().sum::<f64>() / points.len() as f64
}

pub fn metric_add(est: &Pose, gt: &Pose, points: &[Vector3<f64>], diameter: f64, symmetric: bool) -> AddMetric {
    let (value, kind) = if symmetric {
        (adds_value(est, gt, points), MetricKind::AddS)
    } else {
        (add_value(est, gt, points), MetricKind::Add)
    };
    AddMetric {
        value,
        correct: value < ADD_DIAMETER_FRACTION * diameter,
        kind,
    }
}

pub fn evaluate_pose(
    est: &Pose,
    gt: &Pose,
    points: &[Vector3<f64>],
    diameter: f64,
    intr: &CameraIntrinsics,
    symmetric: bool,
) -> Result<MetricReport, GeometryError> {
    Ok(MetricReport {
        proj2d: metric_2d_projection(est, gt, points, intr)?,
        add: metric_add(est, gt, points, diameter, symmetric),
    })
}

/// Area under `τ ↦ fraction of values below τ` for `τ ∈ [0, max_threshold]`,
/// divided by `max_threshold`. NaN for an empty list.
///
/// The curve is a step function, so integrating segment by segment between
/// sorted breakpoints is exact.
pub fn metric_auc(values: &[f64], max_threshold: f64) -> f64 {
    if values.is_empty() || !(max_threshold > 0.0) {
        return f64::NAN;
    }
    let mut sorted: Vec<f64> = values
        .iter()
        .map(|v| if v.is_nan() { f64::INFINITY } else { v.max(0.0) })
        .collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut area = 0.0;
    let mut prev = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        let next = v.min(max_threshold);
        // accuracy is i/n on [prev, next)
        area += (next - prev) * i as f64 / n;
        prev = next;
        if v >= max_threshold {
            break;
        }
    }
    if prev < max_threshold {
        area += (max_threshold - prev) * 1.0;
    }
    area / max_threshold
}
