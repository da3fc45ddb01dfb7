//! Pose from 2D keypoint distributions.
//!
//! [`epnp_init`] gives a closed-form starting pose from the four keypoints with
//! the tightest distributions; [`refine_pose`] then runs Levenberg–Marquardt on
//! the Mahalanobis reprojection error of all keypoints. Residuals are whitened
//! (`r_k = L_k (π(R X_k + t) − μ_k)` with `L_kᵀ L_k = Σ_k⁻¹`) so the LM sum of
//! squares equals the Mahalanobis cost.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_exp, skew, CameraIntrinsics, GeometryError, Pose, RotationVector, MIN_DEPTH};
use crate::voting::KeypointDistribution;

/// Relative spread below which 3D points count as coplanar / collinear.
pub const EPNP_PLANAR_TOL: f64 = 1e-6;
const BETA_GN_ITERS: usize = 30;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PnpError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("covariance of keypoint {0} is not positive definite")]
    SingularCovariance(usize),
    #[error("keypoint {index} is behind the camera")]
    BehindCamera { index: usize },
    #[error("invalid PnP config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    /// Keypoint in the object frame.
    pub point3d: Vector3<f64>,
    pub distribution: KeypointDistribution,
}

impl Correspondence {
    pub fn new(point3d: Vector3<f64>, distribution: KeypointDistribution) -> Self {
        Self {
            point3d,
            distribution,
        }
    }

    pub fn mean(&self) -> Vector2<f64> {
        self.distribution.mean
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        self.distribution.covariance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PnpConfig {
    pub max_iters: usize,
    /// Stop once ‖Jᵀr‖∞ falls below this.
    pub grad_tol: f64,
    pub initial_lambda: f64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-8,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    pub pose: Pose,
    pub final_cost: f64,
    pub initial_cost: f64,
    /// Accepted LM steps.
    pub iterations: usize,
    pub converged: bool,
    /// Cost after the initial pose and after every accepted step.
    pub cost_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct PnpResultJson {
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    pub cost: f64,
    pub iters: usize,
    pub converged: bool,
}

impl PnpResult {
    pub fn to_json_value(&self) -> PnpResultJson {
        let r = &self.pose.rotation;
        PnpResultJson {
            r: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            t: [self.pose.translation.x, self.pose.translation.y, self.pose.translation.z],
            cost: self.final_cost,
            iters: self.iterations,
            converged: self.converged,
        }
    }

    fn not_converged(pose: Pose) -> Self {
        Self {
            pose,
            final_cost: f64::INFINITY,
            initial_cost: f64::INFINITY,
            iterations: 0,
            converged: false,
            cost_history: Vec::new(),
        }
    }
}

impl PnpResultJson {
    pub fn pose(&self) -> Pose {
        Pose {
            rotation: Matrix3::from_fn(|i, j| self.r[i][j]),
            translation: Vector3::new(self.t[0], self.t[1], self.t[2]),
        }
    }
}

// ---------------------------------------------------------------------------
// EPnP

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpnpSolution {
    pub pose: Pose,
    /// Mean pixel distance between projected points and the observations.
    pub reprojection_error: f64,
}

struct ControlFrame {
    /// World control points; 4 in general position, 3 for planar input.
    control: Vec<Vector3<f64>>,
    /// Barycentric coordinates, one row per input point.
    alphas: Vec<Vec<f64>>,
}

fn control_frame(points: &[Vector3<f64>]) -> Result<ControlFrame, PnpError> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spread: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    let axes: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    if spread[0] == 0.0 || spread[1] <= EPNP_PLANAR_TOL * spread[0] {
        return Err(PnpError::DegenerateConfiguration(
            "3D points are collinear or coincident".into(),
        ));
    }
    let n_axes = if spread[2] <= EPNP_PLANAR_TOL * spread[0] { 2 } else { 3 };
    let mut control = vec![c];
    control.extend((0..n_axes).map(|j| c + axes[j] * spread[j]));
    let alphas = points
        .iter()
        .map(|p| {
            let d = p - c;
            let mut a: Vec<f64> = (0..n_axes).map(|j| axes[j].dot(&d) / spread[j]).collect();
            a.insert(0, 1.0 - a.iter().sum::<f64>());
            a
        })
        .collect();
    Ok(ControlFrame { control, alphas })
}

/// Rigid alignment `dst ≈ R·src + t` (Kabsch, no scale).
pub(crate) fn rigid_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        let (min_i, _) = svd.singular_values.argmin();
        d[(min_i, min_i)] = -1.0;
    }
    let r = u * d * v_t;
    Pose {
        rotation: r,
        translation: cd - r * cs,
    }
}

fn mean_reprojection_error(
    pose: &Pose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intr: &CameraIntrinsics,
) -> f64 {
    let mut total = 0.0;
    for (x, u) in points.iter().zip(pixels) {
        match intr.project_camera_point(&pose.transform_point(x)) {
            Ok(p) => total += (p - u).norm(),
            Err(_) => return f64::INFINITY,
        }
    }
    total / points.len() as f64
}

/// Closed-form PnP on point–pixel pairs using virtual control points.
pub fn epnp(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intr: &CameraIntrinsics,
) -> Result<EpnpSolution, PnpError> {
    let n = points.len();
    if n < 4 {
        return Err(PnpError::TooFewCorrespondences(n));
    }
    if pixels.len() != n {
        return Err(PnpError::DegenerateConfiguration(format!(
            "{n} 3D points but {} pixels",
            pixels.len()
        )));
    }
    let frame = control_frame(points)?;
    let nc = frame.control.len();

    let mut m = DMatrix::<f64>::zeros(2 * n, 3 * nc);
    for (i, (alpha, u)) in frame.alphas.iter().zip(pixels).enumerate() {
        for (j, &a) in alpha.iter().enumerate() {
            m[(2 * i, 3 * j)] = a * intr.fx;
            m[(2 * i, 3 * j + 2)] = a * (intr.cx - u.x);
            m[(2 * i + 1, 3 * j + 1)] = a * intr.fy;
            m[(2 * i + 1, 3 * j + 2)] = a * (intr.cy - u.y);
        }
    }
    let mtm = m.transpose() * &m;
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..3 * nc).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let n_null = nc;
    let null: Vec<DVector<f64>> = order[..n_null]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..nc)
        .flat_map(|a| (a + 1..nc).map(move |b| (a, b)))
        .collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (frame.control[a] - frame.control[b]).norm_squared())
        .collect();
    // dv[m][p]: difference of control points a and b in null vector m.
    let dv: Vec<Vec<Vector3<f64>>> = null
        .iter()
        .map(|v| {
            pairs
                .iter()
                .map(|&(a, b)| {
                    Vector3::new(
                        v[3 * a] - v[3 * b],
                        v[3 * a + 1] - v[3 * b + 1],
                        v[3 * a + 2] - v[3 * b + 2],
                    )
                })
                .collect()
        })
        .collect();

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let mut push = |b: Option<Vec<f64>>| {
        if let Some(b) = b {
            if b.iter().all(|x| x.is_finite()) {
                candidates.push(b);
            }
        }
    };
    push(betas_first_row(&dv, &rho, n_null));
    push(betas_two(&dv, &rho, n_null, false));
    if pairs.len() >= 5 && n_null >= 3 {
        push(betas_two(&dv, &rho, n_null, true));
    }

    // Axis-aligned starts; the linearized guesses can sit in the wrong basin
    // when the null space is fully four-dimensional (four points).
    let mean_rho = rho.iter().sum::<f64>() / rho.len() as f64;
    let axis_scale: Vec<f64> = (0..n_null)
        .map(|m| {
            let s = dv[m].iter().map(|d| d.norm_squared()).sum::<f64>() / rho.len() as f64;
            if s > 0.0 {
                (mean_rho / s).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    for m in 0..n_null {
        let mut b = vec![0.0; n_null];
        b[m] = axis_scale[m];
        candidates.push(b);
        for q in m + 1..n_null {
            for sign in [1.0, -1.0] {
                let mut b = vec![0.0; n_null];
                b[m] = axis_scale[m] * std::f64::consts::FRAC_1_SQRT_2;
                b[q] = sign * axis_scale[q] * std::f64::consts::FRAC_1_SQRT_2;
                candidates.push(b);
            }
        }
    }

    let mut best: Option<EpnpSolution> = None;
    for betas in candidates {
        let polished = refine_betas(&dv, &rho, betas.clone());
        for b in [betas, polished] {
            let Some(pose) = pose_from_betas(&b, &null, &frame, points) else {
                continue;
            };
            let err = mean_reprojection_error(&pose, points, pixels, intr);
            if best.as_ref().is_none_or(|s| err < s.reprojection_error) {
                best = Some(EpnpSolution {
                    pose,
                    reprojection_error: err,
                });
            }
        }
    }
    best.ok_or_else(|| PnpError::DegenerateConfiguration("no EPnP candidate produced a pose".into()))
}

/// Coefficient of `β_i β_j` in the squared control-point distance of pair `p`.
fn l_coeff(dv: &[Vec<Vector3<f64>>], p: usize, i: usize, j: usize) -> f64 {
    let d = dv[i][p].dot(&dv[j][p]);
    if i == j {
        d
    } else {
        2.0 * d
    }
}

fn solve_products(dv: &[Vec<Vector3<f64>>], rho: &[f64], cols: &[(usize, usize)]) -> Option<Vec<f64>> {
    let mut l = DMatrix::<f64>::zeros(rho.len(), cols.len());
    for p in 0..rho.len() {
        for (c, &(i, j)) in cols.iter().enumerate() {
            l[(p, c)] = l_coeff(dv, p, i, j);
        }
    }
    let b = DVector::from_column_slice(rho);
    let x = l.svd(true, true).solve(&b, 1e-12).ok()?;
    Some(x.iter().copied().collect())
}

/// Linearized solve for the products `β₀β_j`, read off the first row.
fn betas_first_row(dv: &[Vec<Vector3<f64>>], rho: &[f64], n_null: usize) -> Option<Vec<f64>> {
    let cols: Vec<(usize, usize)> = (0..n_null).map(|j| (0, j)).collect();
    let b = solve_products(dv, rho, &cols)?;
    let mut betas = vec![0.0; n_null];
    let sign = if b[0] < 0.0 { -1.0 } else { 1.0 };
    let b0 = (sign * b[0]).sqrt();
    if b0 == 0.0 {
        return None;
    }
    betas[0] = b0;
    for j in 1..n_null {
        betas[j] = sign * b[j] / b0;
    }
    Some(betas)
}

/// Linearized solve over `β₀², β₀β₁, β₁²` (and `β₀β₂, β₁β₂` when `with_third`).
fn betas_two(dv: &[Vec<Vector3<f64>>], rho: &[f64], n_null: usize, with_third: bool) -> Option<Vec<f64>> {
    if n_null < 2 {
        return None;
    }
    let mut cols = vec![(0, 0), (0, 1), (1, 1)];
    if with_third {
        cols.extend([(0, 2), (1, 2)]);
    }
    let b = solve_products(dv, rho, &cols)?;
    let mut betas = vec![0.0; n_null];
    if b[0] < 0.0 {
        betas[0] = (-b[0]).sqrt();
        betas[1] = if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 };
    } else {
        betas[0] = b[0].sqrt();
        betas[1] = if b[2] > 0.0 { b[2].sqrt() } else { 0.0 };
    }
    if b[1] < 0.0 {
        betas[0] = -betas[0];
    }
    if with_third {
        if betas[0] == 0.0 {
            return None;
        }
        betas[2] = b[3] / betas[0];
    }
    Some(betas)
}

/// Gauss–Newton on `ρ_p = ‖Σ_m β_m dv_m,p‖²` over all betas.
fn refine_betas(dv: &[Vec<Vector3<f64>>], rho: &[f64], mut betas: Vec<f64>) -> Vec<f64> {
    let nb = betas.len();
    for _ in 0..BETA_GN_ITERS {
        let mut j = DMatrix::<f64>::zeros(rho.len(), nb);
        let mut r = DVector::<f64>::zeros(rho.len());
        for p in 0..rho.len() {
            let s: Vector3<f64> = (0..nb).fold(Vector3::zeros(), |a, m| a + dv[m][p] * betas[m]);
            r[p] = rho[p] - s.norm_squared();
            for m in 0..nb {
                j[(p, m)] = -2.0 * s.dot(&dv[m][p]);
            }
        }
        let Ok(step) = j.svd(true, true).solve(&(-r), 1e-14) else {
            break;
        };
        for m in 0..nb {
            betas[m] += step[m];
        }
        if step.norm() <= 1e-15 * (1.0 + betas.iter().map(|b| b * b).sum::<f64>().sqrt()) {
            break;
        }
    }
    betas
}

fn pose_from_betas(
    betas: &[f64],
    null: &[DVector<f64>],
    frame: &ControlFrame,
    points: &[Vector3<f64>],
) -> Option<Pose> {
    let nc = frame.control.len();
    let ctrl_cam: Vec<Vector3<f64>> = (0..nc)
        .map(|j| {
            betas.iter().zip(null).fold(Vector3::zeros(), |a, (b, v)| {
                a + Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b
            })
        })
        .collect();
    let mut cam: Vec<Vector3<f64>> = frame
        .alphas
        .iter()
        .map(|alpha| alpha.iter().zip(&ctrl_cam).fold(Vector3::zeros(), |a, (w, c)| a + c * *w))
        .collect();
    let mean_z = cam.iter().map(|p| p.z).sum::<f64>();
    if mean_z < 0.0 {
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    if cam.iter().all(|p| p.norm() == 0.0) {
        return None;
    }
    Some(rigid_align(points, &cam))
}

/// Indices of the four correspondences with the smallest covariance trace,
/// ties broken by index.
pub fn select_init_keypoints(corrs: &[Correspondence]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..corrs.len()).collect();
    idx.sort_by(|&a, &b| {
        corrs[a]
            .distribution
            .trace()
            .total_cmp(&corrs[b].distribution.trace())
            .then(a.cmp(&b))
    });
    idx.truncate(4);
    idx
}

/// EPnP on the means of the four tightest keypoint distributions.
pub fn epnp_init(corrs: &[Correspondence], intr: &CameraIntrinsics) -> Result<Pose, PnpError> {
    if corrs.len() < 4 {
        return Err(PnpError::TooFewCorrespondences(corrs.len()));
    }
    let chosen = select_init_keypoints(corrs);
    let points: Vec<_> = chosen.iter().map(|&i| corrs[i].point3d).collect();
    let pixels: Vec<_> = chosen.iter().map(|&i| corrs[i].mean()).collect();
    Ok(epnp(&points, &pixels, intr)?.pose)
}

/// EPnP on the means of all correspondences, ignoring covariances.
pub fn epnp_all(corrs: &[Correspondence], intr: &CameraIntrinsics) -> Result<Pose, PnpError> {
    if corrs.len() < 4 {
        return Err(PnpError::TooFewCorrespondences(corrs.len()));
    }
    let points: Vec<_> = corrs.iter().map(|c| c.point3d).collect();
    let pixels: Vec<_> = corrs.iter().map(|c| c.mean()).collect();
    Ok(epnp(&points, &pixels, intr)?.pose)
}

// ---------------------------------------------------------------------------
// Mahalanobis objective

/// `Σ_k (x̃_k − μ_k)ᵀ Σ_k⁻¹ (x̃_k − μ_k)` with `x̃_k = π(R X_k + t)`.
pub fn mahalanobis_cost(
    pose: &Pose,
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
) -> Result<f64, PnpError> {
    let mut total = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let x = intr
            .project_camera_point(&pose.transform_point(&c.point3d))
            .map_err(|_| PnpError::BehindCamera { index: i })?;
        let e = x - c.mean();
        let inv = c.covariance().try_inverse().ok_or(PnpError::SingularCovariance(i))?;
        total += (e.transpose() * inv * e)[(0, 0)];
    }
    Ok(total)
}

/// Correspondence with a whitening matrix `L` such that `LᵀL = Σ⁻¹`.
#[derive(Debug, Clone, Copy)]
pub struct Whitened {
    pub point3d: Vector3<f64>,
    pub mean: Vector2<f64>,
    pub whitening: Matrix2<f64>,
}

pub fn whiten(corrs: &[Correspondence]) -> Result<Vec<Whitened>, PnpError> {
    corrs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cov = c.covariance();
            if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-9 * (1.0 + cov.abs().max()) {
                return Err(PnpError::SingularCovariance(i));
            }
            // Σ = G Gᵀ  ⇒  Σ⁻¹ = G⁻ᵀ G⁻¹, so L = G⁻¹.
            let g = cov.cholesky().ok_or(PnpError::SingularCovariance(i))?.l();
            let l = g.try_inverse().ok_or(PnpError::SingularCovariance(i))?;
            Ok(Whitened {
                point3d: c.point3d,
                mean: c.mean(),
                whitening: l,
            })
        })
        .collect()
}

/// Whitened residual vector (2 entries per keypoint).
pub fn whitened_residuals(
    pose: &Pose,
    obs: &[Whitened],
    intr: &CameraIntrinsics,
) -> Result<DVector<f64>, PnpError> {
    let mut r = DVector::zeros(2 * obs.len());
    for (i, o) in obs.iter().enumerate() {
        let x = intr
            .project_camera_point(&pose.transform_point(&o.point3d))
            .map_err(|_| PnpError::BehindCamera { index: i })?;
        let e = o.whitening * (x - o.mean);
        r[2 * i] = e.x;
        r[2 * i + 1] = e.y;
    }
    Ok(r)
}

/// Jacobian of [`whitened_residuals`] w.r.t. the local update
/// `(δw, δt)` applied as `R ← exp(δw)·R`, `t ← t + δt`.
pub fn whitened_jacobian(
    pose: &Pose,
    obs: &[Whitened],
    intr: &CameraIntrinsics,
) -> Result<DMatrix<f64>, PnpError> {
    let mut j = DMatrix::zeros(2 * obs.len(), 6);
    for (i, o) in obs.iter().enumerate() {
        let rx = pose.rotation * o.point3d;
        let y = rx + pose.translation;
        if y.z <= MIN_DEPTH {
            return Err(PnpError::BehindCamera { index: i });
        }
        let iz = 1.0 / y.z;
        let dpi = nalgebra::Matrix2x3::new(
            intr.fx * iz,
            0.0,
            -intr.fx * y.x * iz * iz,
            0.0,
            intr.fy * iz,
            -intr.fy * y.y * iz * iz,
        );
        // dY/dδw = −[R X]×, dY/dδt = I
        let a = o.whitening * dpi;
        let jw = a * (-skew(&rx));
        for c in 0..3 {
            j[(2 * i, c)] = jw[(0, c)];
            j[(2 * i + 1, c)] = jw[(1, c)];
            j[(2 * i, 3 + c)] = a[(0, c)];
            j[(2 * i + 1, 3 + c)] = a[(1, c)];
        }
    }
    Ok(j)
}

/// Applies the local update `δ = (δw, δt)`.
pub fn apply_update(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let dw = RotationVector::new(delta[0], delta[1], delta[2]);
    Pose {
        rotation: rotation_exp(&dw) * pose.rotation,
        translation: pose.translation + Vector3::new(delta[3], delta[4], delta[5]),
    }
}

fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    u * v_t
}

/// Levenberg–Marquardt on the whitened residuals, Marquardt-scaled damping.
pub fn refine_pose(
    init: &Pose,
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    cfg: &PnpConfig,
) -> Result<PnpResult, PnpError> {
    if !(cfg.grad_tol >= 0.0) || !(cfg.initial_lambda > 0.0) {
        return Err(PnpError::InvalidConfig(format!("{cfg:?}")));
    }
    let obs = whiten(corrs)?;
    let mut pose = *init;
    let mut r = whitened_residuals(&pose, &obs, intr)?;
    let mut cost = r.norm_squared();
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let j = whitened_jacobian(&pose, &obs, intr)?;
        let g = j.transpose() * &r;
        if g.amax() < cfg.grad_tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        let h = j.transpose() * &j;
        let diag_floor = 1e-12 * h.diagonal().max().max(f64::MIN_POSITIVE);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = h.clone();
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(diag_floor);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let delta = Vector6::from_iterator(step.iter().copied());
            let candidate = apply_update(&pose, &delta);
            match whitened_residuals(&candidate, &obs, intr) {
                Ok(cr) if cr.norm_squared() < cost => {
                    pose = candidate;
                    r = cr;
                    cost = r.norm_squared();
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = true;
                    break;
                }
                // Worse cost or a keypoint crossed behind the camera.
                _ => lambda *= 10.0,
            }
        }
        // Not even a vanishing step lowers the cost: stationary to round-off.
        if !accepted {
            converged = true;
            break;
        }
        iterations += 1;
        history.push(cost);
    }
    pose.rotation = orthonormalize(&pose.rotation);
    Ok(PnpResult {
        pose,
        final_cost: cost,
        initial_cost,
        iterations,
        converged,
        cost_history: history,
    })
}

/// Fraction of keypoints in front of the camera.
fn front_fraction(pose: &Pose, corrs: &[Correspondence]) -> f64 {
    let front = corrs
        .iter()
        .filter(|c| pose.transform_point(&c.point3d).z > MIN_DEPTH)
        .count();
    front as f64 / corrs.len() as f64
}

/// EPnP on the four tightest keypoints, then LM over all of them.
pub fn solve_pose(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    cfg: &PnpConfig,
) -> Result<PnpResult, PnpError> {
    let init = epnp_init(corrs, intr)?;
    refine_from(init, corrs, intr, cfg)
}

fn refine_from(
    init: Pose,
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    cfg: &PnpConfig,
) -> Result<PnpResult, PnpError> {
    if front_fraction(&init, corrs) <= 0.5 {
        return Ok(PnpResult::not_converged(init));
    }
    match refine_pose(&init, corrs, intr, cfg) {
        Ok(res) => Ok(res),
        Err(PnpError::BehindCamera { .. }) => Ok(PnpResult::not_converged(init)),
        Err(e) => Err(e),
    }
}

/// How the final pose is computed from keypoint distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PnpVariant {
    /// EPnP on all keypoint means; no refinement.
    EpnpOnly,
    /// [`solve_pose`]: tightest-four EPnP, then Mahalanobis LM.
    Uncertainty,
    /// EPnP on all means, then LM with identity covariances.
    Isotropic,
}

impl PnpVariant {
    pub const ALL: [PnpVariant; 3] = [PnpVariant::EpnpOnly, PnpVariant::Uncertainty, PnpVariant::Isotropic];

    pub fn name(&self) -> &'static str {
        match self {
            PnpVariant::EpnpOnly => "epnp_only",
            PnpVariant::Uncertainty => "uncertainty",
            PnpVariant::Isotropic => "isotropic",
        }
    }
}

pub fn solve_with_variant(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    variant: PnpVariant,
    cfg: &PnpConfig,
) -> Result<PnpResult, PnpError> {
    match variant {
        PnpVariant::Uncertainty => solve_pose(corrs, intr, cfg),
        PnpVariant::EpnpOnly => {
            let pose = epnp_all(corrs, intr)?;
            let cost = mahalanobis_cost(&pose, corrs, intr).unwrap_or(f64::INFINITY);
            Ok(PnpResult {
                pose,
                final_cost: cost,
                initial_cost: cost,
                iterations: 0,
                converged: false,
                cost_history: vec![cost],
            })
        }
        PnpVariant::Isotropic => {
            let iso: Vec<Correspondence> = corrs
                .iter()
                .map(|c| {
                    Correspondence::new(
                        c.point3d,
                        KeypointDistribution::from_moments(c.mean(), Matrix2::identity()),
                    )
                })
                .collect();
            let init = epnp_all(&iso, intr)?;
            refine_from(init, &iso, intr, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        rotation_exp(&RotationVector::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        ))
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> (Pose, Vec<Vector3<f64>>) {
        let pose = Pose {
            rotation: random_rotation(rng),
            translation: Vector3::new(
                rng.random_range(-60.0..60.0),
                rng.random_range(-60.0..60.0),
                rng.random_range(500.0..1000.0),
            ),
        };
        let pts = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                )
            })
            .collect();
        (pose, pts)
    }

    fn exact_corrs(pose: &Pose, pts: &[Vector3<f64>], intr: &CameraIntrinsics, cov: Matrix2<f64>) -> Vec<Correspondence> {
        pts.iter()
            .map(|x| {
                Correspondence::new(*x, KeypointDistribution::from_moments(project(intr, pose, x).unwrap(), cov))
            })
            .collect()
    }

    #[test]
    fn epnp_exact_random_scenes() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [4, 5, 6, 9, 20] {
            for _ in 0..30 {
                let (pose, pts) = random_scene(&mut rng, n);
                let px: Vec<_> = pts.iter().map(|x| project(&intr, &pose, x).unwrap()).collect();
                let sol = epnp(&pts, &px, &intr).unwrap();
                assert!(sol.reprojection_error < 1e-6, "n={n} err={}", sol.reprojection_error);
                assert!(sol.pose.rotation_error(&pose) < 1e-6);
            }
        }
    }

    #[test]
    fn epnp_identity_cube() {
        let intr = CameraIntrinsics::linemod();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 600.0));
        let mut pts = crate::model::shapes::unit_cube_corners();
        pts.iter_mut().for_each(|p| *p = (*p - Vector3::repeat(0.5)) * 100.0);
        let px: Vec<_> = pts.iter().map(|x| project(&intr, &pose, x).unwrap()).collect();
        let sol = epnp(&pts, &px, &intr).unwrap();
        assert!(sol.pose.rotation_error(&pose) < 1e-6);
        assert!(sol.reprojection_error < 1e-6);
    }

    #[test]
    fn epnp_planar_points() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [4, 6, 10] {
            for _ in 0..20 {
                let (pose, mut pts) = random_scene(&mut rng, n);
                pts.iter_mut().for_each(|p| p.z = 0.0);
                let px: Vec<_> = pts.iter().map(|x| project(&intr, &pose, x).unwrap()).collect();
                let sol = epnp(&pts, &px, &intr).unwrap();
                assert!(sol.reprojection_error < 1e-6, "n={n} err={}", sol.reprojection_error);
            }
        }
    }

    #[test]
    fn epnp_rejects_collinear_and_too_few() {
        let intr = CameraIntrinsics::linemod();
        let pts: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 5.0)).collect();
        let px = vec![Vector2::new(1.0, 1.0); 4];
        assert!(matches!(epnp(&pts, &px, &intr), Err(PnpError::DegenerateConfiguration(_))));
        assert!(matches!(epnp(&pts[..3], &px[..3], &intr), Err(PnpError::TooFewCorrespondences(3))));
    }

    #[test]
    fn init_picks_smallest_traces_with_index_ties() {
        let mk = |t: f64| {
            Correspondence::new(
                Vector3::zeros(),
                KeypointDistribution::from_moments(Vector2::zeros(), Matrix2::identity() * t),
            )
        };
        let corrs = vec![mk(5.0), mk(1.0), mk(3.0), mk(1.0), mk(9.0), mk(3.0), mk(0.5)];
        assert_eq!(select_init_keypoints(&corrs), vec![6, 1, 3, 2]);
    }

    #[test]
    fn mahalanobis_examples() {
        let intr = CameraIntrinsics::linemod();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 500.0));
        let x = Vector3::new(10.0, -5.0, 3.0);
        let u = project(&intr, &pose, &x).unwrap();
        let exact = vec![Correspondence::new(x, KeypointDistribution::from_moments(u, Matrix2::identity()))];
        assert_eq!(mahalanobis_cost(&pose, &exact, &intr).unwrap(), 0.0);

        let c = vec![Correspondence::new(
            x,
            KeypointDistribution::from_moments(u - Vector2::new(3.0, 4.0), Matrix2::identity()),
        )];
        assert!((mahalanobis_cost(&pose, &c, &intr).unwrap() - 25.0).abs() < 1e-9);

        let c = vec![Correspondence::new(
            x,
            KeypointDistribution::from_moments(u - Vector2::new(2.0, 0.0), Matrix2::new(4.0, 0.0, 0.0, 1.0)),
        )];
        assert!((mahalanobis_cost(&pose, &c, &intr).unwrap() - 1.0).abs() < 1e-9);

        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -500.0));
        assert!(matches!(mahalanobis_cost(&behind, &c, &intr), Err(PnpError::BehindCamera { index: 0 })));
    }

    #[test]
    fn whitened_cost_equals_mahalanobis() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (pose, pts) = random_scene(&mut rng, 9);
        let corrs: Vec<_> = pts
            .iter()
            .map(|x| {
                let a = Matrix2::new(rng.random_range(0.1..3.0), rng.random_range(-1.0..1.0), 0.0, rng.random_range(0.1..3.0));
                let u = project(&intr, &pose, x).unwrap() + Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                Correspondence::new(*x, KeypointDistribution::from_moments(u, a * a.transpose()))
            })
            .collect();
        let r = whitened_residuals(&pose, &whiten(&corrs).unwrap(), &intr).unwrap();
        let m = mahalanobis_cost(&pose, &corrs, &intr).unwrap();
        assert!((r.norm_squared() - m).abs() < 1e-9 * m);
    }

    #[test]
    fn refine_from_truth_converges_immediately() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pose, pts) = random_scene(&mut rng, 9);
        let corrs = exact_corrs(&pose, &pts, &intr, Matrix2::identity());
        let res = refine_pose(&pose, &corrs, &intr, &PnpConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 1);
        assert!(res.final_cost < 1e-20);
    }

    #[test]
    fn tight_covariances_on_exact_data_still_converge() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (pose, pts) = random_scene(&mut rng, 9);
        let corrs = exact_corrs(&pose, &pts, &intr, Matrix2::identity() * 1e-6);
        let init = Pose {
            rotation: rotation_exp(&RotationVector::new(0.01, -0.02, 0.015)) * pose.rotation,
            translation: pose.translation + Vector3::new(2.0, -1.0, 5.0),
        };
        let res = refine_pose(&init, &corrs, &intr, &PnpConfig::default()).unwrap();
        assert!(res.converged, "{res:?}");
        assert!(res.pose.rotation_error(&pose) < 1e-8);
    }

    #[test]
    fn refine_is_monotone_from_perturbed_init() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (pose, pts) = random_scene(&mut rng, 9);
        let corrs: Vec<_> = pts
            .iter()
            .map(|x| {
                let a = Matrix2::new(rng.random_range(0.2..4.0), rng.random_range(-2.0..2.0), 0.0, rng.random_range(0.2..1.0));
                let u = project(&intr, &pose, x).unwrap() + Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                Correspondence::new(*x, KeypointDistribution::from_moments(u, a * a.transpose()))
            })
            .collect();
        let axis = Vector3::new(0.2, -0.7, 0.4).normalize();
        let init = Pose {
            rotation: rotation_exp(&RotationVector(axis * 5f64.to_radians())) * pose.rotation,
            translation: pose.translation * 1.05,
        };
        let res = refine_pose(&init, &corrs, &intr, &PnpConfig::default()).unwrap();
        assert!(res.final_cost <= res.initial_cost);
        for w in res.cost_history.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(res.converged, "{res:?}");
        assert!(crate::geometry::check_rotation(&res.pose.rotation).is_ok());
    }

    #[test]
    fn solve_pose_rejects_three_correspondences() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (pose, pts) = random_scene(&mut rng, 3);
        let corrs = exact_corrs(&pose, &pts, &intr, Matrix2::identity());
        assert_eq!(solve_pose(&corrs, &intr, &PnpConfig::default()).unwrap_err(), PnpError::TooFewCorrespondences(3));
    }

    #[test]
    fn singular_covariance_is_reported() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (pose, pts) = random_scene(&mut rng, 5);
        let mut corrs = exact_corrs(&pose, &pts, &intr, Matrix2::identity());
        corrs[2].distribution.covariance = Matrix2::new(1.0, 0.0, 0.0, 0.0);
        assert_eq!(refine_pose(&pose, &corrs, &intr, &PnpConfig::default()).unwrap_err(), PnpError::SingularCovariance(2));
    }

    #[test]
    fn behind_camera_init_is_not_converged() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (pose, pts) = random_scene(&mut rng, 6);
        let corrs = exact_corrs(&pose, &pts, &intr, Matrix2::identity());
        let flipped = Pose::from_translation(Vector3::new(0.0, 0.0, -800.0));
        let res = refine_from(flipped, &corrs, &intr, &PnpConfig::default()).unwrap();
        assert!(!res.converged);
        assert_eq!(res.pose, flipped);
    }

    #[test]
    fn result_json_shape() {
        let res = PnpResult {
            pose: Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)),
            final_cost: 0.5,
            initial_cost: 1.0,
            iterations: 3,
            converged: true,
            cost_history: vec![1.0, 0.5],
        };
        let v = serde_json::to_value(res.to_json_value()).unwrap();
        assert_eq!(v["R"][1][1], 1.0);
        assert_eq!(v["t"][2], 3.0);
        assert_eq!(v["iters"], 3);
        assert_eq!(v["converged"], true);
        assert_eq!(v["cost"], 0.5);
        let back: PnpResultJson = serde_json::from_value(v).unwrap();
        assert_eq!(back.pose(), res.pose);
    }
    fn noisy_anisotropic(rng: &mut ChaCha8Rng, pose: &Pose, pts: &[Vector3<f64>], intr: &CameraIntrinsics) -> Vec<Correspondence> {
        pts.iter()
            .map(|x| {
                let a = Matrix2::new(rng.random_range(0.3..3.0), rng.random_range(-1.0..1.0), 0.0, rng.random_range(0.3..3.0));
                let u = project(intr, pose, x).unwrap() + Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                Correspondence::new(*x, KeypointDistribution::from_moments(u, a * a.transpose()))
            })
            .collect()
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let (pose, pts) = random_scene(&mut rng, 7);
            let obs = whiten(&noisy_anisotropic(&mut rng, &pose, &pts, &intr)).unwrap();
            let j = whitened_jacobian(&pose, &obs, &intr).unwrap();
            let h = 1e-6;
            for c in 0..6 {
                let mut d = Vector6::zeros();
                d[c] = h;
                let rp = whitened_residuals(&apply_update(&pose, &d), &obs, &intr).unwrap();
                let rm = whitened_residuals(&apply_update(&pose, &(-d)), &obs, &intr).unwrap();
                let fd = (rp - rm) / (2.0 * h);
                for r in 0..fd.len() {
                    let scale = 1.0 + j[(r, c)].abs();
                    assert!((fd[r] - j[(r, c)]).abs() / scale < 1e-5, "col {c} row {r}: {} vs {}", fd[r], j[(r, c)]);
                }
            }
        }
    }

    /// Plain Gauss–Newton over (rotation vector, t) with R = exp(w), using a
    /// numeric Jacobian of the unweighted pixel residuals.
    fn least_squares_oracle(init: &Pose, pts: &[Vector3<f64>], px: &[Vector2<f64>], intr: &CameraIntrinsics) -> Pose {
        let to_pose = |q: &DVector<f64>| Pose {
            rotation: rotation_exp(&RotationVector::new(q[0], q[1], q[2])),
            translation: Vector3::new(q[3], q[4], q[5]),
        };
        let resid = |q: &DVector<f64>| {
            let pose = to_pose(q);
            DVector::from_iterator(
                2 * pts.len(),
                pts.iter().zip(px).flat_map(|(x, u)| {
                    let e = project(intr, &pose, x).unwrap() - u;
                    [e.x, e.y]
                }),
            )
        };
        let w = crate::geometry::rotation_log(&init.rotation).unwrap().0;
        let mut q = DVector::from_vec(vec![w.x, w.y, w.z, init.translation.x, init.translation.y, init.translation.z]);
        for _ in 0..100 {
            let r = resid(&q);
            let mut j = DMatrix::zeros(r.len(), 6);
            for c in 0..6 {
                let h = 1e-7 * (1.0 + q[c].abs());
                let (mut qp, mut qm) = (q.clone(), q.clone());
                qp[c] += h;
                qm[c] -= h;
                j.set_column(c, &((resid(&qp) - resid(&qm)) / (2.0 * h)));
            }
            let step = (j.transpose() * &j).lu().solve(&(-(j.transpose() * &r))).unwrap();
            q += &step;
            if step.amax() < 1e-14 * (1.0 + q.amax()) {
                break;
            }
        }
        to_pose(&q)
    }

    #[test]
    fn isotropic_refinement_matches_least_squares_oracle() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (pose, pts) = random_scene(&mut rng, 9);
            let px: Vec<_> = pts
                .iter()
                .map(|x| project(&intr, &pose, x).unwrap() + Vector2::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
                .collect();
            let corrs: Vec<_> = pts
                .iter()
                .zip(&px)
                .map(|(x, u)| Correspondence::new(*x, KeypointDistribution::from_moments(*u, Matrix2::identity())))
                .collect();
            let init = epnp_all(&corrs, &intr).unwrap();
            let ours = refine_pose(&init, &corrs, &intr, &PnpConfig::default()).unwrap();
            let oracle = least_squares_oracle(&init, &pts, &px, &intr);
            assert!(ours.pose.rotation_error(&oracle) < 1e-8, "{}", ours.pose.rotation_error(&oracle));
            assert!(ours.pose.translation_error(&oracle) < 1e-8 * oracle.translation.norm());
        }
    }

    #[test]
    fn covariance_scale_does_not_move_optimum() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let (pose, pts) = random_scene(&mut rng, 9);
            let corrs = noisy_anisotropic(&mut rng, &pose, &pts, &intr);
            let base = solve_pose(&corrs, &intr, &PnpConfig::default()).unwrap();
            for c in [1e-3, 37.0, 1e4] {
                let scaled: Vec<_> = corrs
                    .iter()
                    .map(|k| Correspondence::new(k.point3d, KeypointDistribution::from_moments(k.mean(), k.covariance() * c)))
                    .collect();
                let res = solve_pose(&scaled, &intr, &PnpConfig::default()).unwrap();
                assert!(res.pose.rotation_error(&base.pose) < 1e-7);
                assert!(res.pose.translation_error(&base.pose) < 1e-7 * base.pose.translation.norm());
                assert!((res.final_cost * c - base.final_cost).abs() <= 1e-6 * (1.0 + base.final_cost));
            }
        }
    }

    #[test]
    fn keypoint_order_does_not_matter() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let (pose, pts) = random_scene(&mut rng, 8);
            let corrs = noisy_anisotropic(&mut rng, &pose, &pts, &intr);
            let base = solve_pose(&corrs, &intr, &PnpConfig::default()).unwrap();
            let mut perm = corrs.clone();
            perm.reverse();
            perm.swap(1, 5);
            let res = solve_pose(&perm, &intr, &PnpConfig::default()).unwrap();
            assert!(res.pose.rotation_error(&base.pose) < 1e-7);
            assert!(res.pose.translation_error(&base.pose) < 1e-7 * base.pose.translation.norm());
        }
    }

    #[test]
    fn downweighting_a_noisy_keypoint_beats_plain_epnp() {
        let intr = CameraIntrinsics::linemod();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut wins = 0;
        for _ in 0..100 {
            let (pose, pts) = random_scene(&mut rng, 8);
            let noisy = rng.random_range(0..8);
            let corrs: Vec<_> = pts
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let sd = if i == noisy { 20.0 } else { 0.5 };
                    let e = Vector2::new(rng.sample(normal), rng.sample(normal)) * sd;
                    let u = project(&intr, &pose, x).unwrap() + e;
                    Correspondence::new(*x, KeypointDistribution::from_moments(u, Matrix2::identity() * sd * sd))
                })
                .collect();
            let weighted = solve_pose(&corrs, &intr, &PnpConfig::default()).unwrap().pose;
            let plain = epnp_all(&corrs, &intr).unwrap();
            let add = |p: &Pose| pts.iter().map(|x| (p.transform_point(x) - pose.transform_point(x)).norm()).sum::<f64>();
            if add(&weighted) < add(&plain) {
                wins += 1;
            }
        }
        assert!(wins >= 80, "wins {wins}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn exact_correspondences_recover_the_pose(seed in 0u64..100_000, n in 4usize..16) {
            let intr = CameraIntrinsics::linemod();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pose, pts) = random_scene(&mut rng, n);
            let corrs = exact_corrs(&pose, &pts, &intr, Matrix2::identity());
            let res = solve_pose(&corrs, &intr, &PnpConfig::default()).unwrap();
            proptest::prop_assert!(res.pose.rotation_error(&pose) < 1e-6, "{:?}", res);
            proptest::prop_assert!(res.pose.translation_error(&pose) < 1e-6 * pose.translation.norm());
        }

        #[test]
        fn refinement_never_raises_the_cost(seed in 0u64..100_000) {
            let intr = CameraIntrinsics::linemod();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pose, pts) = random_scene(&mut rng, 9);
            let corrs = noisy_anisotropic(&mut rng, &pose, &pts, &intr);
            let init = epnp_init(&corrs, &intr).unwrap();
            let res = refine_pose(&init, &corrs, &intr, &PnpConfig::default()).unwrap();
            for w in res.cost_history.windows(2) {
                proptest::prop_assert!(w[1] <= w[0]);
            }
            proptest::prop_assert!(crate::geometry::check_rotation(&res.pose.rotation).is_ok());
        }
    }
}
