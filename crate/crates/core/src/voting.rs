//! RANSAC-style keypoint voting over a vector field.
//!
//! For each keypoint channel, random pairs of object pixels are intersected
//! along their predicted directions to form hypotheses; every object pixel then
//! votes for the hypotheses it points at (cosine ≥ θ), and the weighted
//! hypotheses are summarized by their mean and covariance.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{SegmentationMask, VectorField};

pub const DEFAULT_NUM_HYPOTHESES: usize = 128;
pub const DEFAULT_INLIER_THRESHOLD: f64 = 0.99;
pub const DEFAULT_COV_EPSILON: f64 = 1e-6;
pub const DEFAULT_BANDWIDTH: f64 = 20.0;
/// Pair sampling gives up after this many attempts per requested hypothesis.
pub const ATTEMPTS_PER_HYPOTHESIS: usize = 10;
/// Relative cross-product magnitude below which two rays count as parallel.
pub const PARALLEL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum VotingError {
    #[error("need at least 2 on-object pixels with usable directions, found {0}")]
    TooFewPixels(usize),
    #[error("no valid hypothesis after {attempts} pair samples")]
    NoValidHypotheses { attempts: usize },
    #[error("total hypothesis weight is zero; no pixel agreed with any hypothesis")]
    ZeroTotalWeight,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid voting config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VotingConfig {
    pub num_hypotheses: usize,
    /// Cosine threshold θ for a pixel to vote for a hypothesis.
    pub inlier_threshold: f64,
    pub seed: u64,
    /// Added to the diagonal of every covariance, pixels².
    pub cov_epsilon: f64,
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self {
            num_hypotheses: DEFAULT_NUM_HYPOTHESES,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            seed: 0,
            cov_epsilon: DEFAULT_COV_EPSILON,
        }
    }
}

impl VotingConfig {
    pub fn validate(&self) -> Result<(), VotingError> {
        if self.num_hypotheses == 0 {
            return Err(VotingError::InvalidConfig("num_hypotheses must be ≥ 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.inlier_threshold) {
            return Err(VotingError::InvalidConfig(format!(
                "inlier_threshold must lie in [-1, 1] (got {})",
                self.inlier_threshold
            )));
        }
        if !(self.cov_epsilon >= 0.0 && self.cov_epsilon.is_finite()) {
            return Err(VotingError::InvalidConfig(format!(
                "cov_epsilon must be finite and ≥ 0 (got {})",
                self.cov_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypothesis {
    pub location: Vector2<f64>,
    pub weight: f64,
}

impl Hypothesis {
    pub fn new(location: Vector2<f64>, weight: f64) -> Self {
        Self { location, weight }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointDistribution {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    pub hypotheses: Vec<Hypothesis>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DistributionJson {
    pub k: usize,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub n_hyps: usize,
}

impl KeypointDistribution {
    pub fn trace(&self) -> f64 {
        self.covariance.trace()
    }

    /// Builds a distribution from a mean and covariance alone, e.g. for a
    /// caller-supplied detection.
    pub fn from_moments(mean: Vector2<f64>, covariance: Matrix2<f64>) -> Self {
        Self {
            mean,
            covariance,
            hypotheses: Vec::new(),
        }
    }

    pub fn to_json_value(&self, k: usize) -> DistributionJson {
        let c = &self.covariance;
        DistributionJson {
            k,
            mean: [self.mean.x, self.mean.y],
            cov: [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]],
            n_hyps: self.hypotheses.len(),
        }
    }
}

impl From<&DistributionJson> for KeypointDistribution {
    fn from(j: &DistributionJson) -> Self {
        Self::from_moments(
            Vector2::new(j.mean[0], j.mean[1]),
            Matrix2::new(j.cov[0][0], j.cov[0][1], j.cov[1][0], j.cov[1][1]),
        )
    }
}

/// Intersection of the forward rays `p1 + t·v1` and `p2 + s·v2` (`t, s > 0`).
pub fn intersect_rays(
    p1: Vector2<f64>,
    v1: Vector2<f64>,
    p2: Vector2<f64>,
    v2: Vector2<f64>,
) -> Option<Vector2<f64>> {
    let cross = v1.x * v2.y - v1.y * v2.x;
    let scale = v1.norm() * v2.norm();
    if scale == 0.0 || !(cross.abs() > PARALLEL_TOL * scale) {
        return None;
    }
    let d = p2 - p1;
    let t = (d.x * v2.y - d.y * v2.x) / cross;
    let s = (d.x * v1.y - d.y * v1.x) / cross;
    if t > 0.0 && s > 0.0 {
        Some(p1 + v1 * t)
    } else {
        None
    }
}

/// Object pixels with nonzero direction for one keypoint channel, laid out
/// for the voting inner loop.
#[derive(Debug, Clone, Default)]
pub struct VotingPixels {
    pub px: Vec<f64>,
    pub py: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

impl VotingPixels {
    pub fn gather(
        mask: &SegmentationMask,
        field: &VectorField,
        k: usize,
    ) -> Result<Self, VotingError> {
        check_inputs(mask, field, k)?;
        let mut out = VotingPixels::default();
        for (col, row) in mask.on_pixels() {
            let v = field.get(col, row, k);
            if v.x == 0.0 && v.y == 0.0 {
                continue;
            }
            out.px.push(col as f64);
            out.py.push(row as f64);
            out.vx.push(v.x);
            out.vy.push(v.y);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.px.len()
    }

    pub fn is_empty(&self) -> bool {
        self.px.is_empty()
    }

    #[inline]
    fn pixel(&self, i: usize) -> (Vector2<f64>, Vector2<f64>) {
        (
            Vector2::new(self.px[i], self.py[i]),
            Vector2::new(self.vx[i], self.vy[i]),
        )
    }

    /// Number of pixels whose direction agrees with `h` at cosine ≥ θ.
    ///
    /// `dot / n ≥ θ` is evaluated as a comparison of squares so the loop
    /// needs no square root or division; a pixel sitting on `h` never votes.
    pub fn count_votes(&self, h: Vector2<f64>, theta: f64) -> u32 {
        let (px, py, vx, vy) = (&self.px, &self.py, &self.vx, &self.vy);
        let theta2 = theta * theta;
        let n = px.len();
        let (px, py, vx, vy) = (&px[..n], &py[..n], &vx[..n], &vy[..n]);
        let mut count = 0u32;
        if theta >= 0.0 {
            for i in 0..n {
                let dx = h.x - px[i];
                let dy = h.y - py[i];
                let n2 = dx * dx + dy * dy;
                let dot = dx * vx[i] + dy * vy[i];
                count += u32::from((n2 > 0.0) & (dot >= 0.0) & (dot * dot >= theta2 * n2));
            }
        } else {
            for i in 0..n {
                let dx = h.x - px[i];
                let dy = h.y - py[i];
                let n2 = dx * dx + dy * dy;
                let dot = dx * vx[i] + dy * vy[i];
                count += u32::from((n2 > 0.0) & ((dot >= 0.0) | (dot * dot <= theta2 * n2)));
            }
        }
        count
    }
}

fn check_inputs(mask: &SegmentationMask, field: &VectorField, k: usize) -> Result<(), VotingError> {
    field
        .check_mask(mask)
        .map_err(|e| VotingError::DimensionMismatch(e.to_string()))?;
    if k >= field.k() {
        return Err(VotingError::DimensionMismatch(format!(
            "keypoint index {k} out of range for a field with {} channels",
            field.k()
        )));
    }
    Ok(())
}

/// Random stream used for keypoint channel `k`.
pub fn keypoint_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Hypotheses for channel `k` with zero weight, in sampling order.
pub fn generate_hypotheses(
    mask: &SegmentationMask,
    field: &VectorField,
    k: usize,
    cfg: &VotingConfig,
) -> Result<Vec<Hypothesis>, VotingError> {
    cfg.validate()?;
    let pixels = VotingPixels::gather(mask, field, k)?;
    hypotheses_from_pixels(&pixels, k, cfg)
}

fn hypotheses_from_pixels(
    pixels: &VotingPixels,
    k: usize,
    cfg: &VotingConfig,
) -> Result<Vec<Hypothesis>, VotingError> {
    let m = pixels.len();
    if m < 2 {
        return Err(VotingError::TooFewPixels(m));
    }
    let mut rng = keypoint_rng(cfg.seed, k);
    let max_attempts = ATTEMPTS_PER_HYPOTHESIS * cfg.num_hypotheses;
    let mut hyps = Vec::with_capacity(cfg.num_hypotheses);
    let mut attempts = 0;
    while hyps.len() < cfg.num_hypotheses && attempts < max_attempts {
        attempts += 1;
        let i = rng.random_range(0..m);
        let mut j = rng.random_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        let (p1, v1) = pixels.pixel(i);
        let (p2, v2) = pixels.pixel(j);
        if let Some(h) = intersect_rays(p1, v1, p2, v2) {
            hyps.push(Hypothesis::new(h, 0.0));
        }
    }
    if hyps.is_empty() {
        return Err(VotingError::NoValidHypotheses { attempts });
    }
    Ok(hyps)
}

/// Fills every hypothesis weight with its vote count for channel `k`.
pub fn score_hypotheses(
    mask: &SegmentationMask,
    field: &VectorField,
    k: usize,
    hyps: &[Hypothesis],
    theta: f64,
) -> Result<Vec<Hypothesis>, VotingError> {
    let pixels = VotingPixels::gather(mask, field, k)?;
    Ok(score_with_pixels(&pixels, hyps, theta))
}

fn score_with_pixels(pixels: &VotingPixels, hyps: &[Hypothesis], theta: f64) -> Vec<Hypothesis> {
    hyps.par_iter()
        .map(|h| Hypothesis::new(h.location, pixels.count_votes(h.location, theta) as f64))
        .collect()
}

/// Sum with a fixed pairwise reduction tree.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().fold(0.0, |a, b| a + b);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Weighted mean and weighted population covariance of the hypotheses, with
/// `cov_epsilon·I` added to the covariance.
pub fn estimate_distribution(
    hyps: &[Hypothesis],
    cov_epsilon: f64,
) -> Result<KeypointDistribution, VotingError> {
    let weights: Vec<f64> = hyps.iter().map(|h| h.weight).collect();
    let total = pairwise_sum(&weights);
    if !(total > 0.0) {
        return Err(VotingError::ZeroTotalWeight);
    }
    let wx: Vec<f64> = hyps.iter().map(|h| h.weight * h.location.x).collect();
    let wy: Vec<f64> = hyps.iter().map(|h| h.weight * h.location.y).collect();
    let mean = Vector2::new(pairwise_sum(&wx) / total, pairwise_sum(&wy) / total);

    let mut sxx = Vec::with_capacity(hyps.len());
    let mut sxy = Vec::with_capacity(hyps.len());
    let mut syy = Vec::with_capacity(hyps.len());
    for h in hyps {
        let d = h.location - mean;
        sxx.push(h.weight * d.x * d.x);
        sxy.push(h.weight * d.x * d.y);
        syy.push(h.weight * d.y * d.y);
    }
    let cxy = pairwise_sum(&sxy) / total;
    let covariance = Matrix2::new(
        pairwise_sum(&sxx) / total + cov_epsilon,
        cxy,
        cxy,
        pairwise_sum(&syy) / total + cov_epsilon,
    );
    Ok(KeypointDistribution {
        mean,
        covariance,
        hypotheses: hyps.to_vec(),
    })
}

/// Generate, score and summarize hypotheses for channel `k`.
pub fn vote_keypoint(
    mask: &SegmentationMask,
    field: &VectorField,
    k: usize,
    cfg: &VotingConfig,
) -> Result<KeypointDistribution, VotingError> {
    cfg.validate()?;
    let pixels = VotingPixels::gather(mask, field, k)?;
    let hyps = hypotheses_from_pixels(&pixels, k, cfg)?;
    let scored = score_with_pixels(&pixels, &hyps, cfg.inlier_threshold);
    estimate_distribution(&scored, cfg.cov_epsilon)
}

/// [`vote_keypoint`] for every channel of the field, in channel order.
pub fn vote_all(
    mask: &SegmentationMask,
    field: &VectorField,
    cfg: &VotingConfig,
) -> Result<Vec<KeypointDistribution>, VotingError> {
    (0..field.k())
        .into_par_iter()
        .map(|k| vote_keypoint(mask, field, k, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub center: Vector2<f64>,
    /// Total hypothesis weight within the bandwidth of the center.
    pub weight: f64,
    pub pixels: Vec<(u32, u32)>,
}

const MEAN_SHIFT_MAX_ITERS: usize = 300;

fn flat_kernel_mean(hyps: &[Hypothesis], at: Vector2<f64>, bandwidth: f64) -> Option<(Vector2<f64>, f64)> {
    let bw2 = bandwidth * bandwidth;
    let mut acc = Vector2::zeros();
    let mut w = 0.0;
    for h in hyps {
        if (h.location - at).norm_squared() <= bw2 {
            acc += h.location * h.weight;
            w += h.weight;
        }
    }
    (w > 0.0).then(|| (acc / w, w))
}

/// Finds instance centers as modes of the weighted center hypotheses
/// (flat-kernel mean shift) and assigns each object pixel to the center
/// closest to its center-direction ray. Uses field channel 0.
pub fn find_instances(
    center_hyps: &[Hypothesis],
    mask: &SegmentationMask,
    field: &VectorField,
    bandwidth: f64,
) -> Result<Vec<Instance>, VotingError> {
    check_inputs(mask, field, 0)?;
    if !(bandwidth > 0.0) {
        return Err(VotingError::InvalidConfig(format!("bandwidth must be positive (got {bandwidth})")));
    }
    let active: Vec<Hypothesis> = center_hyps.iter().copied().filter(|h| h.weight > 0.0).collect();
    if active.is_empty() {
        return Ok(Vec::new());
    }

    let mut modes: Vec<(Vector2<f64>, f64)> = active
        .par_iter()
        .map(|seed| {
            let mut m = seed.location;
            let mut support = seed.weight;
            for _ in 0..MEAN_SHIFT_MAX_ITERS {
                let Some((next, w)) = flat_kernel_mean(&active, m, bandwidth) else {
                    break;
                };
                let shift = (next - m).norm();
                m = next;
                support = w;
                if shift <= 1e-9 * bandwidth {
                    break;
                }
            }
            (m, support)
        })
        .collect();

    // Heaviest modes first; stable sort keeps seed order on ties.
    modes.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut centers: Vec<(Vector2<f64>, f64)> = Vec::new();
    for (m, w) in modes {
        if centers.iter().all(|(c, _)| (c - m).norm() >= bandwidth) {
            centers.push((m, w));
        }
    }

    let mut instances: Vec<Instance> = centers
        .iter()
        .map(|&(center, weight)| Instance {
            center,
            weight,
            pixels: Vec::new(),
        })
        .collect();
    for (col, row) in mask.on_pixels() {
        let p = Vector2::new(col as f64, row as f64);
        let v = field.get(col, row, 0);
        let vv = v.norm_squared();
        // (perpendicular distance, distance along the ray) to a center
        let approach = |c: &Vector2<f64>| {
            if vv == 0.0 {
                return ((c - p).norm(), 0.0);
            }
            let t = ((c - p).dot(&v) / vv).max(0.0);
            ((c - (p + v * t)).norm(), t)
        };
        // Within the bandwidth the first center reached along the ray wins;
        // otherwise the ray passing closest wins.
        let mut best = 0;
        let mut best_key = (true, f64::INFINITY);
        for (i, inst) in instances.iter().enumerate() {
            let (d, t) = approach(&inst.center);
            let key = if d < bandwidth { (false, t) } else { (true, d) };
            if key < best_key {
                best = i;
                best_key = key;
            }
        }
        instances[best].pixels.push((col, row));
    }
    Ok(instances)
}
