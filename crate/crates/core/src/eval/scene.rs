//! Synthetic scenes: random pose, splatted silhouette, optional truncation
//! crop and occluder, and a (possibly corrupted) ground-truth vector field.

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::derive_seed;
use crate::field::{corrupt_field, gt_vector_field, FieldError, NoiseConfig, SegmentationMask, VectorField};
use crate::geometry::{project, CameraIntrinsics, GeometryError, Pose, MIN_DEPTH};
use crate::model::{KeypointSet, ObjectModel};

/// Structuring-element radius of the closing that fills gaps between splats.
pub const CLOSING_RADIUS: i64 = 2;
const TRUNCATION_ATTEMPTS: usize = 64;
const BISECTION_STEPS: usize = 48;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("object is not visible after occlusion/truncation")]
    ObjectNotVisible,
    #[error("no truncation crop satisfied the constraints after {0} attempts")]
    TruncationFailed(usize),
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseSamplerConfig {
    /// Depth range of the model center, model units.
    pub depth_min: f64,
    pub depth_max: f64,
    /// Central fraction of the image (per axis) the model center projects into.
    pub center_region: f64,
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        Self {
            depth_min: 700.0,
            depth_max: 1100.0,
            center_region: 0.8,
        }
    }
}

impl PoseSamplerConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.depth_min > 0.0 && self.depth_max >= self.depth_min && self.depth_max.is_finite()) {
            return Err(SceneError::InvalidConfig(format!(
                "depth range [{}, {}] must be positive and ordered",
                self.depth_min, self.depth_max
            )));
        }
        if !(self.center_region >= 0.0 && self.center_region <= 1.0) {
            return Err(SceneError::InvalidConfig(format!(
                "center_region {} outside [0, 1]",
                self.center_region
            )));
        }
        Ok(())
    }
}

/// Crop that keeps a random fraction of the object's pixels in view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    #[serde(default = "default_min_visible")]
    pub min_visible: f64,
    #[serde(default = "default_max_visible")]
    pub max_visible: f64,
    /// Reject crops leaving fewer keypoints (center included) outside the image.
    #[serde(default)]
    pub min_keypoints_outside: usize,
}

fn default_min_visible() -> f64 {
    0.4
}

fn default_max_visible() -> f64 {
    0.6
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            min_visible: default_min_visible(),
            max_visible: default_max_visible(),
            min_keypoints_outside: 0,
        }
    }
}

impl TruncationConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(0.0 < self.min_visible && self.min_visible <= self.max_visible && self.max_visible <= 1.0) {
            return Err(SceneError::InvalidConfig(format!(
                "visible range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.min_visible, self.max_visible
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub intrinsics: CameraIntrinsics,
    pub pose: PoseSamplerConfig,
    /// Fraction of (post-truncation) object pixels hidden by the occluder.
    pub occlusion: f64,
    pub truncation: Option<TruncationConfig>,
    /// Field corruption; its `seed` is replaced by one derived from the scene seed.
    pub noise: NoiseConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::linemod(),
            pose: PoseSamplerConfig::default(),
            occlusion: 0.0,
            truncation: None,
            noise: NoiseConfig::none(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        self.noise.validate()?;
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(SceneError::InvalidConfig(format!("occlusion {} outside [0, 1]", self.occlusion)));
        }
        if let Some(t) = &self.truncation {
            t.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationInfo {
    /// Top-left of the crop window in original image coordinates.
    pub offset: (i64, i64),
    pub visible_fraction: f64,
    pub keypoints_outside: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// Intrinsics of the (possibly cropped) image the mask and field live in.
    pub intr: CameraIntrinsics,
    pub gt_pose: Pose,
    pub mask: SegmentationMask,
    pub field: VectorField,
    /// Ground-truth keypoint projections under `intr`; may lie outside the image.
    pub keypoints2d_gt: Vec<Vector2<f64>>,
    pub noise: NoiseConfig,
    pub occluded_fraction: f64,
    pub truncation: Option<TruncationInfo>,
}

/// Uniform rotation; center depth uniform in range and projected into the
/// central region of the image.
pub fn sample_pose(
    rng: &mut impl Rng,
    model_center: &Vector3<f64>,
    intr: &CameraIntrinsics,
    cfg: &PoseSamplerConfig,
) -> Pose {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    let z = if cfg.depth_max > cfg.depth_min {
        rng.random_range(cfg.depth_min..=cfg.depth_max)
    } else {
        cfg.depth_min
    };
    let pick = |rng: &mut dyn rand::RngCore, extent: u32| {
        let lo = extent as f64 * (1.0 - cfg.center_region) * 0.5;
        let hi = extent as f64 - lo;
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let uv = Vector2::new(pick(rng, intr.width), pick(rng, intr.height));
    let target = intr.back_project(&uv, z);
    Pose {
        rotation,
        translation: target - rotation * model_center,
    }
}

/// Silhouette of the model: every projected surface point marks a 3×3
/// block, then a closing fills the gaps between splats.
pub fn render_mask(points: &[Vector3<f64>], pose: &Pose, intr: &CameraIntrinsics) -> Result<SegmentationMask, SceneError> {
    let (w, h) = (intr.width as i64, intr.height as i64);
    let mut on = vec![false; (w * h) as usize];
    for x in points {
        let y = pose.transform_point(x);
        if y.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { depth: y.z }.into());
        }
        let uv = intr.project_camera_point(&y)?;
        let (c, r) = (uv.x.round() as i64, uv.y.round() as i64);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (cc, rr) = (c + dc, r + dr);
                if (0..w).contains(&cc) && (0..h).contains(&rr) {
                    on[(rr * w + cc) as usize] = true;
                }
            }
        }
    }
    let closed = close(&on, w, h, CLOSING_RADIUS);
    Ok(SegmentationMask::from_fn(intr.width, intr.height, |c, r| {
        closed[(r as i64 * w + c as i64) as usize]
    }))
}

/// Square-element dilation followed by erosion; pixels beyond the border
/// count as set during erosion so objects touching the edge are not eaten.
fn close(on: &[bool], w: i64, h: i64, radius: i64) -> Vec<bool> {
    let dilated = morph(on, w, h, radius, false);
    morph(&dilated, w, h, radius, true)
}

/// Separable min/max filter over a `(2r+1)²` square.
fn morph(src: &[bool], w: i64, h: i64, r: i64, erode: bool) -> Vec<bool> {
    let pass = |src: &[bool], horizontal: bool| -> Vec<bool> {
        let mut out = vec![false; src.len()];
        for row in 0..h {
            for col in 0..w {
                let mut acc = erode;
                for d in -r..=r {
                    let (c, rr) = if horizontal { (col + d, row) } else { (col, row + d) };
                    let v = if (0..w).contains(&c) && (0..h).contains(&rr) {
                        src[(rr * w + c) as usize]
                    } else {
                        erode
                    };
                    if erode {
                        acc &= v;
                    } else {
                        acc |= v;
                    }
                }
                out[(row * w + col) as usize] = acc;
            }
        }
        out
    };
    let tmp = pass(src, true);
    pass(&tmp, false)
}

fn keypoints_outside(kps: &[Vector2<f64>], w: u32, h: u32) -> usize {
    kps.iter()
        .filter(|p| p.x < -0.5 || p.y < -0.5 || p.x > w as f64 - 0.5 || p.y > h as f64 - 0.5)
        .count()
}

/// Picks a translated crop window of the original size whose visible object
/// fraction is a uniform draw from the configured range.
fn choose_crop(
    rng: &mut impl Rng,
    pixels: &[(u32, u32)],
    kps: &[Vector2<f64>],
    w: u32,
    h: u32,
    cfg: &TruncationConfig,
) -> Result<TruncationInfo, SceneError> {
    let total = pixels.len() as f64;
    let visible = |x0: i64, y0: i64| {
        let n = pixels
            .iter()
            .filter(|&&(c, r)| {
                let (c, r) = (c as i64 - x0, r as i64 - y0);
                c >= 0 && r >= 0 && c < w as i64 && r < h as i64
            })
            .count();
        n as f64 / total
    };
    let max_shift = (w + h) as f64;
    for _ in 0..TRUNCATION_ATTEMPTS {
        let target = if cfg.max_visible > cfg.min_visible {
            rng.random_range(cfg.min_visible..=cfg.max_visible)
        } else {
            cfg.min_visible
        };
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = Vector2::new(angle.cos(), angle.sin());
        let at = |s: f64| ((s * dir.x).round() as i64, (s * dir.y).round() as i64);
        let (mut lo, mut hi) = (0.0, max_shift);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            let (x0, y0) = at(mid);
            if visible(x0, y0) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // Whichever bracket end lands closer to the target.
        let cands = [at(lo), at(hi)];
        let (x0, y0) = *cands
            .iter()
            .min_by(|a, b| {
                (visible(a.0, a.1) - target)
                    .abs()
                    .total_cmp(&(visible(b.0, b.1) - target).abs())
            })
            .unwrap();
        let frac = visible(x0, y0);
        let shifted: Vec<_> = kps.iter().map(|p| p - Vector2::new(x0 as f64, y0 as f64)).collect();
        let outside = keypoints_outside(&shifted, w, h);
        if frac >= cfg.min_visible && frac <= cfg.max_visible && outside >= cfg.min_keypoints_outside {
            return Ok(TruncationInfo {
                offset: (x0, y0),
                visible_fraction: frac,
                keypoints_outside: outside,
            });
        }
    }
    Err(SceneError::TruncationFailed(TRUNCATION_ATTEMPTS))
}

/// Hides at least `fraction` of the mask's pixels with an axis-aligned
/// rectangle centered on a random object pixel. Returns the hidden fraction.
pub fn occlude(rng: &mut impl Rng, mask: &mut SegmentationMask, fraction: f64) -> f64 {
    let pixels = mask.on_pixels();
    if fraction <= 0.0 || pixels.is_empty() {
        return 0.0;
    }
    let needed = ((fraction * pixels.len() as f64).ceil() as usize).min(pixels.len());
    let (cc, cr) = pixels[rng.random_range(0..pixels.len())];
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let (sx, sy) = (aspect.sqrt() * 0.5, 0.5 / aspect.sqrt());
    let covered = |s: f64| {
        pixels
            .iter()
            .filter(|&&(c, r)| {
                (c as f64 - cc as f64).abs() <= s * sx && (r as f64 - cr as f64).abs() <= s * sy
            })
            .count()
    };
    // Covered count is monotone in the scale; find the smallest that suffices.
    let (mut lo, mut hi) = (0.0, 4.0 * (mask.width() + mask.height()) as f64);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if covered(mid) >= needed {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut hidden = 0;
    for &(c, r) in &pixels {
        if (c as f64 - cc as f64).abs() <= hi * sx && (r as f64 - cr as f64).abs() <= hi * sy {
            mask.set(c, r, 0);
            hidden += 1;
        }
    }
    hidden as f64 / pixels.len() as f64
}

/// Generates one scene. Everything random derives from `seed`.
pub fn synth_scene(
    model: &ObjectModel,
    keypoints: &KeypointSet,
    cfg: &SceneConfig,
    seed: u64,
) -> Result<SceneSample, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let intr0 = cfg.intrinsics;
    let gt_pose = sample_pose(&mut rng, &model.center(), &intr0, &cfg.pose);
    let full = render_mask(&model.surface_points, &gt_pose, &intr0)?;
    let kps0 = keypoints
        .points3d
        .iter()
        .map(|x| project(&intr0, &gt_pose, x))
        .collect::<Result<Vec<_>, _>>()?;

    let (intr, mut mask, truncation) = match &cfg.truncation {
        None => (intr0, full, None),
        Some(t) => {
            let pixels = full.on_pixels();
            if pixels.is_empty() {
                return Err(SceneError::ObjectNotVisible);
            }
            let info = choose_crop(&mut rng, &pixels, &kps0, intr0.width, intr0.height, t)?;
            let (x0, y0) = info.offset;
            let cropped = SegmentationMask::from_fn(intr0.width, intr0.height, |c, r| {
                let (oc, or) = (c as i64 + x0, r as i64 + y0);
                oc >= 0
                    && or >= 0
                    && oc < intr0.width as i64
                    && or < intr0.height as i64
                    && full.is_on(oc as u32, or as u32)
            });
            (intr0.cropped(x0, y0, intr0.width, intr0.height), cropped, Some(info))
        }
    };
    let keypoints2d_gt = keypoints
        .points3d
        .iter()
        .map(|x| project(&intr, &gt_pose, x))
        .collect::<Result<Vec<_>, _>>()?;

    let occluded_fraction = occlude(&mut rng, &mut mask, cfg.occlusion);
    if mask.count() == 0 {
        return Err(SceneError::ObjectNotVisible);
    }
    let noise = NoiseConfig {
        seed: derive_seed(seed, &[1]),
        ..cfg.noise
    };
    let clean = gt_vector_field(&mask, &keypoints2d_gt)?;
    let field = corrupt_field(&clean, &mask, &noise)?;
    Ok(SceneSample {
        intr,
        gt_pose,
        mask,
        field,
        keypoints2d_gt,
        noise,
        occluded_fraction,
        truncation,
    })
}
