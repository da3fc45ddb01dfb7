//! Rigid transforms, pinhole intrinsics and the axis-angle parameterization
//! used for pose refinement.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points with camera-frame depth at or below this value cannot be projected.
pub const MIN_DEPTH: f64 = 1e-9;

/// Orthonormality / determinant tolerance for a valid rotation matrix.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },
    #[error("matrix is not a valid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid transform from the object frame to the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose after checking that `rotation` lies on SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Maps an object-frame point into the camera frame: `R·X + t`.
    #[inline]
    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Checks `RᵀR = I` and `det R = +1` within [`ROTATION_TOL`].
pub fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::InvalidRotation("non-finite entry".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    if ortho > ROTATION_TOL {
        return Err(GeometryError::InvalidRotation(format!(
            "RᵀR deviates from identity by {ortho:.3e}"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(GeometryError::InvalidRotation(format!("determinant {det}")));
    }
    Ok(())
}

/// Pinhole camera without distortion. Image size is only used for bookkeeping;
/// projection never clamps to the image rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// The 640×480 camera used by the LINEMOD benchmark.
    pub fn linemod() -> Self {
        Self {
            fx: 572.4114,
            fy: 573.57043,
            cx: 325.2611,
            cy: 242.04899,
            width: 640,
            height: 480,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if self.width < 1 || self.height < 1 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be at least 1×1 (got {}×{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point.
    #[inline]
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { depth: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-frame point at depth `z` along the ray through pixel `uv`.
    pub fn back_project(&self, uv: &Vector2<f64>, z: f64) -> Vector3<f64> {
        Vector3::new(
            (uv.x - self.cx) / self.fx * z,
            (uv.y - self.cy) / self.fy * z,
            z,
        )
    }

    /// Same camera with the principal point moved into a cropped window whose
    /// top-left corner sits at `(x0, y0)` in the original image.
    pub fn cropped(&self, x0: i64, y0: i64, width: u32, height: u32) -> Self {
        Self {
            cx: self.cx - x0 as f64,
            cy: self.cy - y0 as f64,
            width,
            height,
            ..*self
        }
    }
}

/// Maps `X` to the camera frame: `R·X + t`.
#[inline]
pub fn transform_point(pose: &Pose, x: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(x)
}

/// Perspective projection `π(R·X + t)`.
#[inline]
pub fn project(
    intr: &CameraIntrinsics,
    pose: &Pose,
    x: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    intr.project_camera_point(&pose.transform_point(x))
}

/// Axis-angle rotation (direction = axis, norm = angle in radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVector(pub Vector3<f64>);

impl RotationVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn rotation_exp(w: &RotationVector) -> Matrix3<f64> {
    let w = &w.0;
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < 1e-12 {
        // Taylor expansions of sin(θ)/θ and (1 − cos θ)/θ².
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`rotation_exp`]. Returns an angle in `[0, π]`.
pub fn rotation_log(r: &Matrix3<f64>) -> Result<RotationVector, GeometryError> {
    check_rotation(r)?;
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    // |vee| = 2 sin θ; atan2 stays accurate near 0 and π where acos does not.
    let theta = (0.5 * vee.norm()).atan2(cos_theta);
    if theta < 1e-6 {
        // θ/(2 sin θ) ≈ 1/2 + θ²/12
        return Ok(RotationVector(vee * (0.5 + theta * theta / 12.0)));
    }
    if std::f64::consts::PI - theta < 1e-3 {
        // Symmetric part is cos θ·I + (1 − cos θ)·a·aᵀ; the antisymmetric
        // part only fixes the sign of the axis.
        let s = (r + r.transpose()) * 0.5;
        let aat = (s - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
        let mut col = 0;
        for i in 1..3 {
            if aat[(i, i)] > aat[(col, col)] {
                col = i;
            }
        }
        let mut axis = aat.column(col).into_owned();
        axis /= axis.norm();
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return Ok(RotationVector(axis * theta));
    }
    Ok(RotationVector(vee * (theta / (2.0 * theta.sin()))))
}
