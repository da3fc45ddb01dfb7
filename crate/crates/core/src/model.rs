//! Object models and keypoint selection.
//!
//! A [`KeypointSet`] always stores the object center at index 0 followed by
//! the selected keypoints, so `points3d.len() == K + 1`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Above this many points the diameter search prunes interior points first.
pub const EXACT_DIAMETER_LIMIT: usize = 20_000;

/// Relative extent below which a point cloud is considered coplanar.
pub const COPLANAR_REL_TOL: f64 = 1e-6;

/// Default number of surface keypoints.
pub const DEFAULT_K: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("model has {0} points; at least 4 are required")]
    TooFewPoints(usize),
    #[error("requested {requested} keypoints but the model only has {available} points")]
    KTooLarge { requested: usize, available: usize },
    #[error("K must be at least 1")]
    KZero,
    #[error("keypoint selection produced coincident keypoints")]
    CoincidentKeypoints,
    #[error("invalid keypoint file: {0}")]
    InvalidKeypoints(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub name: String,
    pub surface_points: Vec<Vector3<f64>>,
    /// All points lie in a common plane (within [`COPLANAR_REL_TOL`]); pose
    /// solving from such a model needs the planar EPnP path.
    pub coplanar: bool,
}

impl ObjectModel {
    pub fn new(name: impl Into<String>, surface_points: Vec<Vector3<f64>>) -> Result<Self, ModelError> {
        if surface_points.len() < 4 {
            return Err(ModelError::TooFewPoints(surface_points.len()));
        }
        let coplanar = is_coplanar(&surface_points);
        Ok(Self {
            name: name.into(),
            surface_points,
            coplanar,
        })
    }

    /// Unweighted centroid of the surface points.
    pub fn center(&self) -> Vector3<f64> {
        centroid(&self.surface_points)
    }

    pub fn len(&self) -> usize {
        self.surface_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface_points.is_empty()
    }
}

pub fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p);
    sum / points.len() as f64
}

/// Principal spreads (square roots of covariance eigenvalues), ascending.
pub(crate) fn principal_spreads(points: &[Vector3<f64>]) -> [f64; 3] {
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    [ev[0], ev[1], ev[2]]
}

pub(crate) fn is_coplanar(points: &[Vector3<f64>]) -> bool {
    let s = principal_spreads(points);
    s[2] == 0.0 || s[0] <= COPLANAR_REL_TOL * s[2]
}

/// Reads vertex positions from an ASCII PLY file.
pub fn load_model(path: impl AsRef<Path>) -> Result<ObjectModel, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let points = parse_ply(&text)?;
    ObjectModel::new(name, points)
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

/// Parses the vertex positions of an ASCII PLY document. Elements other than
/// `vertex` are skipped; the `x`, `y`, `z` properties may appear in any order.
pub fn parse_ply(text: &str) -> Result<Vec<Vector3<f64>>, ModelError> {
    let err = |line: usize, message: String| ModelError::Parse { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, other)) => return Err(err(n, format!("expected 'ply' magic, found '{other}'"))),
        None => return Err(err(1, "empty file".into())),
    }

    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;
    for (n, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                match tok.next() {
                    Some("ascii") => {}
                    Some(f) => return Err(err(n, format!("unsupported PLY format '{f}' (only ascii)"))),
                    None => return Err(err(n, "missing format type".into())),
                }
                saw_format = true;
            }
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| err(n, "element without name".into()))?
                    .to_string();
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| err(n, format!("bad element count for '{name}'")))?;
                elements.push(PlyElement {
                    name,
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(n, "property before any element".into()))?;
                let rest: Vec<&str> = tok.collect();
                let name = match rest.as_slice() {
                    ["list", _, _, name] => format!("list:{name}"),
                    [_, name] => name.to_string(),
                    _ => return Err(err(n, format!("malformed property line '{line}'"))),
                };
                el.properties.push(name);
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(err(n, format!("unknown header keyword '{other}'"))),
        }
    }
    if !header_done {
        return Err(err(text.lines().count(), "missing end_header".into()));
    }
    if !saw_format {
        return Err(err(1, "missing format line".into()));
    }

    let mut points = Vec::new();
    for el in &elements {
        let axis = |a: &str| el.properties.iter().position(|p| p == a);
        let is_vertex = el.name == "vertex";
        let idx = if is_vertex {
            match (axis("x"), axis("y"), axis("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(err(0, "vertex element lacks x/y/z properties".into())),
            }
        } else {
            None
        };
        // Lists make the token count per row variable, so non-vertex rows are
        // consumed one line each without further inspection.
        let has_list = el.properties.iter().any(|p| p.starts_with("list:"));
        let mut read = 0;
        while read < el.count {
            let (n, line) = lines
                .next()
                .ok_or_else(|| err(text.lines().count(), format!("unexpected end of file in element '{}'", el.name)))?;
            if line.is_empty() {
                continue;
            }
            read += 1;
            if let Some(idx) = idx {
                let vals: Vec<&str> = line.split_whitespace().collect();
                if !has_list && vals.len() < el.properties.len() {
                    return Err(err(n, format!("expected {} values, found {}", el.properties.len(), vals.len())));
                }
                let mut xyz = [0.0; 3];
                for (slot, &i) in xyz.iter_mut().zip(idx.iter()) {
                    let tok = vals.get(i).ok_or_else(|| err(n, "missing coordinate".into()))?;
                    *slot = f64::from_str(tok).map_err(|_| err(n, format!("invalid number '{tok}'")))?;
                    if !slot.is_finite() {
                        return Err(err(n, format!("non-finite coordinate '{tok}'")));
                    }
                }
                points.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
        }
    }
    Ok(points)
}

/// Serializes points as a vertex-only ASCII PLY document.
pub fn write_ply(points: &[Vector3<f64>]) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointScheme {
    Fps,
    Bbox,
}

impl fmt::Display for KeypointScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeypointScheme::Fps => "fps",
            KeypointScheme::Bbox => "bbox",
        })
    }
}

impl FromStr for KeypointScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fps" => Ok(Self::Fps),
            "bbox" => Ok(Self::Bbox),
            other => Err(format!("unknown keypoint scheme '{other}' (expected fps or bbox)")),
        }
    }
}

/// Object center (index 0) followed by `K` keypoints in the object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub scheme: KeypointScheme,
    pub points3d: Vec<Vector3<f64>>,
}

#[derive(Serialize, Deserialize)]
struct KeypointSetJson {
    scheme: KeypointScheme,
    points3d: Vec<[f64; 3]>,
}

impl KeypointSet {
    /// Number of keypoints excluding the center.
    pub fn k(&self) -> usize {
        self.points3d.len().saturating_sub(1)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.points3d[0]
    }

    /// True when two keypoints share a location (e.g. a flat bounding box).
    pub fn is_degenerate(&self) -> bool {
        min_pairwise_distance(&self.points3d) == 0.0
    }

    pub fn to_json(&self) -> String {
        let j = KeypointSetJson {
            scheme: self.scheme,
            points3d: self.points3d.iter().map(|p| [p.x, p.y, p.z]).collect(),
        };
        serde_json::to_string_pretty(&j).expect("keypoint set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let j: KeypointSetJson =
            serde_json::from_str(text).map_err(|e| ModelError::InvalidKeypoints(e.to_string()))?;
        if j.points3d.len() < 2 {
            return Err(ModelError::InvalidKeypoints(
                "need the center plus at least one keypoint".into(),
            ));
        }
        Ok(Self {
            scheme: j.scheme,
            points3d: j.points3d.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
        })
    }
}

pub(crate) fn min_pairwise_distance(points: &[Vector3<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min((points[i] - points[j]).norm());
        }
    }
    best
}

/// Farthest point sampling seeded with the object center.
///
/// Each step adds the surface point maximizing the minimum distance to every
/// point already in the set (center included). Ties go to the lowest index.
pub fn fps_select(model: &ObjectModel, k: usize) -> Result<KeypointSet, ModelError> {
    let pts = &model.surface_points;
    if k == 0 {
        return Err(ModelError::KZero);
    }
    if k > pts.len() {
        return Err(ModelError::KTooLarge {
            requested: k,
            available: pts.len(),
        });
    }
    let center = model.center();
    let mut min_dist: Vec<f64> = pts.iter().map(|p| (p - center).norm()).collect();
    let mut taken = vec![false; pts.len()];
    let mut out = Vec::with_capacity(k + 1);
    out.push(center);
    for _ in 0..k {
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, &d) in min_dist.iter().enumerate() {
            if !taken[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        if best_d <= 0.0 {
            return Err(ModelError::CoincidentKeypoints);
        }
        taken[best] = true;
        let chosen = pts[best];
        out.push(chosen);
        for (d, p) in min_dist.iter_mut().zip(pts) {
            *d = d.min((p - chosen).norm());
        }
    }
    Ok(KeypointSet {
        scheme: KeypointScheme::Fps,
        points3d: out,
    })
}

/// Eight corners of the axis-aligned bounding box plus the object center.
///
/// Corner `i` takes the max along axis `a` when bit `a` of `i` is set.
/// A flat model yields coincident corners; check [`KeypointSet::is_degenerate`].
pub fn bbox_corners(model: &ObjectModel) -> KeypointSet {
    let (lo, hi) = bounds(&model.surface_points);
    let mut out = Vec::with_capacity(9);
    out.push(model.center());
    for i in 0..8 {
        out.push(Vector3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        ));
    }
    KeypointSet {
        scheme: KeypointScheme::Bbox,
        points3d: out,
    }
}

pub fn bounds(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Largest pairwise distance between surface points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDiameter(pub f64);

impl ModelDiameter {
    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Exact diameter. Brute force up to [`EXACT_DIAMETER_LIMIT`] points; above
/// that, points that provably cannot be an endpoint of a longer chord than a
/// known lower bound are discarded before the exhaustive pass.
pub fn model_diameter(model: &ObjectModel) -> ModelDiameter {
    let pts = &model.surface_points;
    if pts.len() <= EXACT_DIAMETER_LIMIT {
        return ModelDiameter(brute_force_diameter(pts));
    }
    let (lo, hi) = bounds(pts);
    let mid = (lo + hi) * 0.5;
    let radius = pts.iter().map(|p| (p - mid).norm()).fold(0.0, f64::max);
    // Lower bound from a few farthest-point sweeps.
    let mut lower = 0.0f64;
    let mut probe = pts[0];
    for _ in 0..4 {
        let (far, d) = pts
            .iter()
            .map(|p| (*p, (p - probe).norm()))
            .fold((probe, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        lower = lower.max(d);
        probe = far;
    }
    // |p − q| ≤ |p − mid| + radius, so p can only beat `lower` if this holds.
    let candidates: Vec<Vector3<f64>> = pts
        .iter()
        .copied()
        .filter(|p| (p - mid).norm() + radius >= lower)
        .collect();
    ModelDiameter(brute_force_diameter(&candidates).max(lower))
}

fn brute_force_diameter(pts: &[Vector3<f64>]) -> f64 {
    let best_sq = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let a = pts[i];
            pts[i + 1..]
                .iter()
                .map(|b| (a - b).norm_squared())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    best_sq.sqrt()
}

/// Procedurally generated models used by the synthetic benchmark.
pub mod shapes {
    use super::*;

    pub const BUILTIN: [&str; 3] = ["cube", "blob", "bracket"];

    pub fn builtin(name: &str) -> Option<ObjectModel> {
        let pts = match name {
            "cube" => cube_surface(100.0, 2.0),
            "blob" => blob_surface(),
            "bracket" => bracket_surface(),
            _ => return None,
        };
        Some(ObjectModel::new(name, pts).expect("builtin shapes are valid"))
    }

    /// The 8 corners of the unit cube `[0,1]³`, corner `i` at bit pattern `i`.
    pub fn unit_cube_corners() -> Vec<Vector3<f64>> {
        (0..8)
            .map(|i| {
                Vector3::new(
                    (i & 1) as f64,
                    ((i >> 1) & 1) as f64,
                    ((i >> 2) & 1) as f64,
                )
            })
            .collect()
    }

    /// Grid-sampled surface of an axis-aligned box centered at the origin.
    pub fn box_surface(size: Vector3<f64>, spacing: f64) -> Vec<Vector3<f64>> {
        let steps = size.map(|s| ((s / spacing).round() as usize).max(1));
        let half = size * 0.5;
        let coord = |a: usize, i: usize| -half[a] + size[a] * i as f64 / steps[a] as f64;
        let mut pts = Vec::new();
        for i in 0..=steps.x {
            for j in 0..=steps.y {
                for k in 0..=steps.z {
                    let on_face = i == 0 || i == steps.x || j == 0 || j == steps.y || k == 0 || k == steps.z;
                    if on_face {
                        pts.push(Vector3::new(coord(0, i), coord(1, j), coord(2, k)));
                    }
                }
            }
        }
        pts
    }

    pub fn cube_surface(side: f64, spacing: f64) -> Vec<Vector3<f64>> {
        box_surface(Vector3::repeat(side), spacing)
    }

    /// Star-shaped lumpy ellipsoid.
    pub fn blob_surface() -> Vec<Vector3<f64>> {
        let (n_theta, n_phi) = (90, 180);
        let mut pts = Vec::with_capacity(n_theta * n_phi);
        for i in 0..n_theta {
            let theta = std::f64::consts::PI * (i as f64 + 0.5) / n_theta as f64;
            for j in 0..n_phi {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / n_phi as f64;
                let r = 1.0 + 0.22 * (3.0 * theta).sin() * (2.0 * phi).cos() + 0.1 * (5.0 * phi).sin() * theta.sin();
                pts.push(Vector3::new(
                    55.0 * r * theta.sin() * phi.cos(),
                    38.0 * r * theta.sin() * phi.sin(),
                    30.0 * r * theta.cos() + 8.0 * (phi).cos(),
                ));
            }
        }
        pts
    }

    /// An L-shaped bracket with a post: three boxes, asymmetric.
    pub fn bracket_surface() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        let parts = [
            (Vector3::new(120.0, 30.0, 20.0), Vector3::new(0.0, 0.0, 0.0)),
            (Vector3::new(20.0, 30.0, 70.0), Vector3::new(-50.0, 0.0, 45.0)),
            (Vector3::new(16.0, 16.0, 40.0), Vector3::new(40.0, 5.0, 30.0)),
        ];
        for (size, offset) in parts {
            pts.extend(box_surface(size, 2.0).into_iter().map(|p| p + offset));
        }
        pts
    }
}
