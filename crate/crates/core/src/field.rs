//! Per-pixel unit-vector fields pointing at 2D keypoints, their noisy
//! counterparts, and the smooth-ℓ1 loss between two fields.
//!
//! Pixel `(col, row)` is located at exactly `(col, row)` in image coordinates.

use std::io::{self, BufRead, BufReader, Read, Write};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FIELD_MAGIC: &[u8; 4] = b"PVF1";

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid noise config: {0}")]
    InvalidNoise(String),
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-pixel object labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_labels(width: u32, height: u32, labels: Vec<u8>) -> Result<Self, FieldError> {
        if labels.len() != width as usize * height as usize {
            return Err(FieldError::DimensionMismatch(format!(
                "{} labels for a {width}×{height} mask",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    /// Mask where `f(col, row)` marks on-object pixels with label 1.
    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for row in 0..height {
            for col in 0..width {
                if f(col, row) {
                    m.set(col, row, 1);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, col: u32, row: u32) -> u8 {
        self.labels[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, col: u32, row: u32, label: u8) {
        self.labels[row as usize * self.width as usize + col as usize] = label;
    }

    #[inline]
    pub fn is_on(&self, col: u32, row: u32) -> bool {
        self.get(col, row) != 0
    }

    /// On-object pixels in row-major order.
    pub fn on_pixels(&self) -> Vec<(u32, u32)> {
        let w = self.width as usize;
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Binary mask of the pixels carrying `label`.
    pub fn select(&self, label: u8) -> SegmentationMask {
        SegmentationMask {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| u8::from(l == label && l != 0)).collect(),
        }
    }

    /// Writes a binary PGM (P5, maxval 255) with the raw labels.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.labels)
    }

    pub fn read_pgm<R: Read>(r: R) -> Result<Self, FieldError> {
        let mut r = BufReader::new(r);
        let bad = |m: &str| FieldError::Format {
            what: "PGM",
            message: m.to_string(),
        };
        let mut tokens = Vec::new();
        // Header: magic, width, height, maxval; '#' comments allowed.
        while tokens.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated header"));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_string));
        }
        if tokens.len() > 4 {
            return Err(bad("unexpected data on header line"));
        }
        if tokens[0] != "P5" {
            return Err(bad(&format!("expected P5, found {}", tokens[0])));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| bad(&format!("invalid number '{s}'")));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad(&format!("unsupported maxval {maxval}")));
        }
        let mut labels = vec![0u8; width as usize * height as usize];
        r.read_exact(&mut labels).map_err(|_| bad("truncated pixel data"))?;
        Ok(Self {
            width,
            height,
            labels,
        })
    }
}

/// Per-pixel, per-keypoint 2D vectors. Background pixels hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    width: u32,
    height: u32,
    k: usize,
    /// Row-major pixels, keypoint-fastest, `(x, y)` per entry.
    data: Vec<f64>,
}

impl VectorField {
    pub fn zeros(width: u32, height: u32, k: usize) -> Self {
        Self {
            width,
            height,
            k,
            data: vec![0.0; width as usize * height as usize * k * 2],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Number of keypoint channels.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, col: u32, row: u32, kp: usize) -> usize {
        ((row as usize * self.width as usize + col as usize) * self.k + kp) * 2
    }

    #[inline]
    pub fn get(&self, col: u32, row: u32, kp: usize) -> Vector2<f64> {
        let o = self.offset(col, row, kp);
        Vector2::new(self.data[o], self.data[o + 1])
    }

    #[inline]
    pub fn set(&mut self, col: u32, row: u32, kp: usize, v: Vector2<f64>) {
        let o = self.offset(col, row, kp);
        self.data[o] = v.x;
        self.data[o + 1] = v.y;
    }

    pub fn check_mask(&self, mask: &SegmentationMask) -> Result<(), FieldError> {
        if mask.width != self.width || mask.height != self.height {
            return Err(FieldError::DimensionMismatch(format!(
                "field is {}×{} but mask is {}×{}",
                self.width, self.height, mask.width, mask.height
            )));
        }
        Ok(())
    }

    /// Little-endian `PVF1` dump: magic, `u32` width, height, K, then f32 data.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(FIELD_MAGIC)?;
        for v in [self.width, self.height, self.k as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, FieldError> {
        let bad = |m: String| FieldError::Format {
            what: "field dump",
            message: m,
        };
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        if &header[0..4] != FIELD_MAGIC {
            return Err(bad(format!("bad magic {:?}", &header[0..4])));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let (width, height, k) = (word(4), word(8), word(12) as usize);
        if k == 0 {
            return Err(bad("zero keypoint channels".into()));
        }
        let n = width as usize * height as usize * k * 2;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| bad(format!("expected {n} float32 values")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            width,
            height,
            k,
            data,
        })
    }
}

/// Unit direction from pixel `p` to keypoint `x`; zero when they coincide.
#[inline]
pub fn unit_direction(p: Vector2<f64>, x: Vector2<f64>) -> Vector2<f64> {
    let d = x - p;
    let n = d.norm();
    if n == 0.0 {
        Vector2::zeros()
    } else {
        d / n
    }
}

/// Ground-truth field: on-object pixels get the unit vector toward each
/// keypoint. Keypoints may lie outside the image.
pub fn gt_vector_field(
    mask: &SegmentationMask,
    keypoints2d: &[Vector2<f64>],
) -> Result<VectorField, FieldError> {
    if keypoints2d.is_empty() {
        return Err(FieldError::DimensionMismatch("no keypoints given".into()));
    }
    if mask.labels.len() != mask.width as usize * mask.height as usize {
        return Err(FieldError::DimensionMismatch("mask label buffer size".into()));
    }
    let k = keypoints2d.len();
    let mut field = VectorField::zeros(mask.width, mask.height, k);
    let row_len = mask.width as usize * k * 2;
    if row_len == 0 {
        return Ok(field);
    }
    field
        .data
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(row, chunk)| {
            for col in 0..mask.width {
                if !mask.is_on(col, row as u32) {
                    continue;
                }
                let p = Vector2::new(col as f64, row as f64);
                for (kp, x) in keypoints2d.iter().enumerate() {
                    let v = unit_direction(p, *x);
                    let o = (col as usize * k + kp) * 2;
                    chunk[o] = v.x;
                    chunk[o + 1] = v.y;
                }
            }
        });
    Ok(field)
}

/// Surrogate for network prediction error: Gaussian angular jitter plus
/// uniformly random outlier directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of the direction perturbation, radians.
    pub angular_sigma: f64,
    /// Fraction of on-object vectors replaced by a random direction.
    pub outlier_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            angular_sigma: 0.0,
            outlier_rate: 0.0,
            seed: 0,
        }
    }

    pub fn new(angular_sigma: f64, outlier_rate: f64, seed: u64) -> Self {
        Self {
            angular_sigma,
            outlier_rate,
            seed,
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.angular_sigma == 0.0 && self.outlier_rate == 0.0
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.angular_sigma >= 0.0 && self.angular_sigma.is_finite()) {
            return Err(FieldError::InvalidNoise(format!(
                "angular_sigma must be finite and ≥ 0 (got {})",
                self.angular_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(FieldError::InvalidNoise(format!(
                "outlier_rate must lie in [0, 1] (got {})",
                self.outlier_rate
            )));
        }
        Ok(())
    }
}

/// Applies [`NoiseConfig`] to every nonzero on-object vector. Each image row
/// draws from its own ChaCha stream, so the output does not depend on how rows
/// are scheduled.
pub fn corrupt_field(
    field: &VectorField,
    mask: &SegmentationMask,
    cfg: &NoiseConfig,
) -> Result<VectorField, FieldError> {
    cfg.validate()?;
    field.check_mask(mask)?;
    let mut out = field.clone();
    if cfg.is_noiseless() {
        return Ok(out);
    }
    let k = field.k;
    let row_len = field.width as usize * k * 2;
    if row_len == 0 {
        return Ok(out);
    }
    let normal = (cfg.angular_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.angular_sigma).expect("validated sigma"));
    out.data
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(row, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(row as u64);
            for col in 0..mask.width {
                if !mask.is_on(col, row as u32) {
                    continue;
                }
                for kp in 0..k {
                    let o = (col as usize * k + kp) * 2;
                    let (x, y) = (chunk[o], chunk[o + 1]);
                    if x == 0.0 && y == 0.0 {
                        continue;
                    }
                    if cfg.outlier_rate > 0.0 && rng.random::<f64>() < cfg.outlier_rate {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        chunk[o] = a.cos();
                        chunk[o + 1] = a.sin();
                    } else if let Some(normal) = &normal {
                        let (s, c) = normal.sample(&mut rng).sin_cos();
                        chunk[o] = c * x - s * y;
                        chunk[o + 1] = s * x + c * y;
                    }
                }
            }
        });
    Ok(out)
}

#[inline]
pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Smooth-ℓ1 loss summed over keypoints, on-object pixels and both vector
/// components.
pub fn smooth_l1_loss(
    pred: &VectorField,
    gt: &VectorField,
    mask: &SegmentationMask,
) -> Result<f64, FieldError> {
    if pred.width != gt.width || pred.height != gt.height || pred.k != gt.k {
        return Err(FieldError::DimensionMismatch(format!(
            "prediction is {}×{}×{} but ground truth is {}×{}×{}",
            pred.width, pred.height, pred.k, gt.width, gt.height, gt.k
        )));
    }
    gt.check_mask(mask)?;
    let mut total = 0.0;
    for (col, row) in mask.on_pixels() {
        for kp in 0..gt.k {
            let d = pred.get(col, row, kp) - gt.get(col, row, kp);
            total += smooth_l1(d.x) + smooth_l1(d.y);
        }
    }
    Ok(total)
}
