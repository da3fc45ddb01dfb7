//! Grid experiments: every combination of model, keypoint layout, PnP
//! variant, noise level, occlusion and truncation setting is a cell, and
//! every cell runs the same number of seeded trials.
//!
//! A trial's scene seed depends on the master seed, the model, noise,
//! occlusion and truncation indices and the trial index. It does not depend
//! on the keypoint layout or PnP variant, so those axes are compared on
//! identical scenes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::derive_seed;
use super::metrics::{evaluate_pose, metric_auc, MetricKind};
use super::scene::{synth_scene, PoseSamplerConfig, SceneConfig, TruncationConfig};
use crate::field::NoiseConfig;
use crate::geometry::CameraIntrinsics;
use crate::model::{bbox_corners, fps_select, load_model, model_diameter, shapes, KeypointScheme, KeypointSet, ModelError, ObjectModel};
use crate::pnp::{solve_with_variant, Correspondence, PnpConfig, PnpVariant};
use crate::voting::{vote_all, VotingConfig, DEFAULT_COV_EPSILON, DEFAULT_INLIER_THRESHOLD, DEFAULT_NUM_HYPOTHESES};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message} (line {line}, column {column})")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn path(&self) -> &str {
        match self {
            ConfigError::Parse { path, .. } | ConfigError::Invalid { path, .. } => path,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Model { path: String, source: ModelError },
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Builtin shape name, or a label when `path` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// ASCII PLY file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Score with ADD-S instead of ADD.
    #[serde(default)]
    pub symmetric: bool,
}

impl ModelSpec {
    pub fn builtin(name: &str) -> Self {
        Self {
            name: Some(name.to_string()),
            path: None,
            symmetric: false,
        }
    }

    pub fn label(&self) -> String {
        match (&self.name, &self.path) {
            (Some(n), _) => n.clone(),
            (None, Some(p)) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            (None, None) => String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointSpec {
    pub scheme: KeypointScheme,
    /// Surface keypoints besides the center; bounding boxes always have 8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl KeypointSpec {
    pub fn fps(k: usize) -> Self {
        Self {
            scheme: KeypointScheme::Fps,
            k: Some(k),
        }
    }

    pub fn bbox() -> Self {
        Self {
            scheme: KeypointScheme::Bbox,
            k: None,
        }
    }

    pub fn count(&self) -> usize {
        match self.scheme {
            KeypointScheme::Bbox => 8,
            KeypointScheme::Fps => self.k.unwrap_or(crate::model::DEFAULT_K),
        }
    }

    pub fn build(&self, model: &ObjectModel) -> Result<KeypointSet, ModelError> {
        match self.scheme {
            KeypointScheme::Fps => fps_select(model, self.count()),
            KeypointScheme::Bbox => Ok(bbox_corners(model)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub angular_sigma: f64,
    #[serde(default)]
    pub outlier_rate: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            angular_sigma: 0.0,
            outlier_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VotingSpec {
    pub num_hypotheses: usize,
    pub inlier_threshold: f64,
    pub cov_epsilon: f64,
}

impl Default for VotingSpec {
    fn default() -> Self {
        Self {
            num_hypotheses: DEFAULT_NUM_HYPOTHESES,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            cov_epsilon: DEFAULT_COV_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub models: Vec<ModelSpec>,
    pub keypoints: Vec<KeypointSpec>,
    #[serde(default = "default_variants")]
    pub variants: Vec<PnpVariant>,
    #[serde(default = "default_noise")]
    pub noise: Vec<NoiseSpec>,
    #[serde(default = "default_occlusion")]
    pub occlusion: Vec<f64>,
    #[serde(default = "default_truncation")]
    pub truncation: Vec<Option<TruncationConfig>>,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub voting: VotingSpec,
    #[serde(default)]
    pub pnp: PnpConfig,
    #[serde(default = "CameraIntrinsics::linemod")]
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub pose_sampler: PoseSamplerConfig,
    /// AUC integration limit in model units (builtin shapes are in mm).
    #[serde(default = "default_auc_max")]
    pub auc_max_threshold: f64,
}

fn default_variants() -> Vec<PnpVariant> {
    PnpVariant::ALL.to_vec()
}

fn default_noise() -> Vec<NoiseSpec> {
    vec![NoiseSpec::none()]
}

fn default_occlusion() -> Vec<f64> {
    vec![0.0]
}

fn default_truncation() -> Vec<Option<TruncationConfig>> {
    vec![None]
}

fn default_auc_max() -> f64 {
    100.0
}

impl ExperimentConfig {
    /// A config with one value on every axis and default settings elsewhere.
    pub fn single(model: ModelSpec, keypoints: KeypointSpec, variant: PnpVariant, trials: usize, seed: u64) -> Self {
        Self {
            models: vec![model],
            keypoints: vec![keypoints],
            variants: vec![variant],
            noise: default_noise(),
            occlusion: default_occlusion(),
            truncation: default_truncation(),
            trials,
            seed,
            voting: VotingSpec::default(),
            pnp: PnpConfig::default(),
            intrinsics: CameraIntrinsics::linemod(),
            pose_sampler: PoseSamplerConfig::default(),
            auc_max_threshold: default_auc_max(),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.models.len()
            * self.keypoints.len()
            * self.variants.len()
            * self.noise.len()
            * self.occlusion.len()
            * self.truncation.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn non_empty<T>(v: &[T], path: &str) -> Result<(), ConfigError> {
            if v.is_empty() {
                return Err(ConfigError::invalid(path, "must not be empty"));
            }
            Ok(())
        }
        non_empty(&self.models, "models")?;
        non_empty(&self.keypoints, "keypoints")?;
        non_empty(&self.variants, "variants")?;
        non_empty(&self.noise, "noise")?;
        non_empty(&self.occlusion, "occlusion")?;
        non_empty(&self.truncation, "truncation")?;
        if self.trials == 0 {
            return Err(ConfigError::invalid("trials", "must be at least 1"));
        }
        for (i, m) in self.models.iter().enumerate() {
            match (&m.name, &m.path) {
                (None, None) => return Err(ConfigError::invalid(format!("models[{i}]"), "needs a name or a path")),
                (Some(n), None) if shapes::builtin(n).is_none() => {
                    return Err(ConfigError::invalid(
                        format!("models[{i}].name"),
                        format!("unknown builtin model {n:?} (known: {})", shapes::BUILTIN.join(", ")),
                    ))
                }
                _ => {}
            }
        }
        for (i, k) in self.keypoints.iter().enumerate() {
            match (k.scheme, k.k) {
                (KeypointScheme::Fps, Some(0)) => {
                    return Err(ConfigError::invalid(format!("keypoints[{i}].k"), "must be at least 1"))
                }
                (KeypointScheme::Fps, Some(n)) if n + 1 < 4 => {
                    return Err(ConfigError::invalid(
                        format!("keypoints[{i}].k"),
                        "pose estimation needs at least 3 surface keypoints",
                    ))
                }
                (KeypointScheme::Bbox, Some(n)) if n != 8 => {
                    return Err(ConfigError::invalid(format!("keypoints[{i}].k"), "bbox layouts always have k = 8"))
                }
                _ => {}
            }
        }
        for (i, n) in self.noise.iter().enumerate() {
            if !(n.angular_sigma >= 0.0 && n.angular_sigma.is_finite()) {
                return Err(ConfigError::invalid(format!("noise[{i}].angular_sigma"), "must be finite and >= 0"));
            }
            if !(0.0..=1.0).contains(&n.outlier_rate) {
                return Err(ConfigError::invalid(format!("noise[{i}].outlier_rate"), "must lie in [0, 1]"));
            }
        }
        for (i, o) in self.occlusion.iter().enumerate() {
            if !(0.0..=1.0).contains(o) {
                return Err(ConfigError::invalid(format!("occlusion[{i}]"), "must lie in [0, 1]"));
            }
        }
        for (i, t) in self.truncation.iter().enumerate() {
            if let Some(t) = t {
                t.validate()
                    .map_err(|e| ConfigError::invalid(format!("truncation[{i}]"), e.to_string()))?;
            }
        }
        let v = &self.voting;
        if v.num_hypotheses == 0 {
            return Err(ConfigError::invalid("voting.num_hypotheses", "must be at least 1"));
        }
        if !(-1.0..=1.0).contains(&v.inlier_threshold) {
            return Err(ConfigError::invalid("voting.inlier_threshold", "must lie in [-1, 1]"));
        }
        if !(v.cov_epsilon > 0.0 && v.cov_epsilon.is_finite()) {
            return Err(ConfigError::invalid("voting.cov_epsilon", "must be positive"));
        }
        if !(self.pnp.grad_tol >= 0.0) {
            return Err(ConfigError::invalid("pnp.grad_tol", "must be >= 0"));
        }
        if !(self.pnp.initial_lambda > 0.0) {
            return Err(ConfigError::invalid("pnp.initial_lambda", "must be positive"));
        }
        self.intrinsics
            .validate()
            .map_err(|e| ConfigError::invalid("intrinsics", e.to_string()))?;
        self.pose_sampler
            .validate()
            .map_err(|e| ConfigError::invalid("pose_sampler", e.to_string()))?;
        if !(self.auc_max_threshold > 0.0) {
            return Err(ConfigError::invalid("auc_max_threshold", "must be positive"));
        }
        Ok(())
    }
}

/// Parses and validates a JSON experiment config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub scheme: KeypointScheme,
    pub k: usize,
    pub variant: PnpVariant,
    pub angular_sigma: f64,
    pub outlier_rate: f64,
    pub occlusion: f64,
    pub truncation: Option<TruncationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    /// Why no pose was produced, if none was.
    pub error: Option<String>,
    pub proj2d_error: Option<f64>,
    pub proj2d_correct: bool,
    pub add_value: Option<f64>,
    pub add_correct: bool,
    pub rotation_error_deg: Option<f64>,
    pub translation_error: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Mean distance between voted keypoint means and their true projections, px.
    pub mean_keypoint_error: Option<f64>,
}

impl TrialRecord {
    fn failed(trial: usize, seed: u64, error: String) -> Self {
        Self {
            trial,
            seed,
            error: Some(error),
            proj2d_error: None,
            proj2d_correct: false,
            add_value: None,
            add_correct: false,
            rotation_error_deg: None,
            translation_error: None,
            converged: false,
            iterations: 0,
            mean_keypoint_error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// "proj2d", "ADD" or "ADD-S".
    pub metric: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean and population standard deviation over trials that produced a pose.
    pub mean: f64,
    pub std: f64,
    /// Area under the accuracy–threshold curve; ADD metrics only.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub metrics: Vec<MetricSummary>,
    pub trials: Vec<TrialRecord>,
}

impl CellResult {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    /// Success rate under the 2D projection metric.
    pub fn proj2d_rate(&self) -> f64 {
        self.metrics[0].success_rate
    }

    /// Success rate under ADD or ADD-S.
    pub fn add_rate(&self) -> f64 {
        self.metrics[1].success_rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
}

pub const CSV_HEADER: [&str; 15] = [
    "model",
    "scheme",
    "k",
    "variant",
    "angular_sigma",
    "outlier_rate",
    "occlusion",
    "truncation",
    "metric",
    "trials",
    "successes",
    "success_rate",
    "mean",
    "std",
    "auc",
];

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6}")
    }
}

fn truncation_label(t: &Option<TruncationConfig>) -> String {
    match t {
        None => "none".into(),
        Some(t) => format!("{:.2}-{:.2}", t.min_visible, t.max_visible),
    }
}

impl ExperimentReport {
    /// One row per cell and metric.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for cell in &self.cells {
            let k = &cell.key;
            for m in &cell.metrics {
                w.write_record([
                    k.model.clone(),
                    k.scheme.to_string(),
                    k.k.to_string(),
                    k.variant.name().to_string(),
                    fmt_f64(k.angular_sigma),
                    fmt_f64(k.outlier_rate),
                    fmt_f64(k.occlusion),
                    truncation_label(&k.truncation),
                    m.metric.clone(),
                    m.trials.to_string(),
                    m.successes.to_string(),
                    fmt_f64(m.success_rate),
                    fmt_f64(m.mean),
                    fmt_f64(m.std),
                    m.auc.map(fmt_f64).unwrap_or_default(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width success-rate table for terminals.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<6} {:>3} {:<12} {:>6} {:>6} {:>5} {:<10} {:>8} {:>8} {:>7}",
            "model", "scheme", "k", "variant", "sigma", "outl", "occl", "trunc", "proj2d%", "add%", "auc"
        );
        for c in &self.cells {
            let k = &c.key;
            let add = &c.metrics[1];
            let _ = writeln!(
                out,
                "{:<10} {:<6} {:>3} {:<12} {:>6.3} {:>6.3} {:>5.2} {:<10} {:>8.1} {:>8.1} {:>7.3}",
                k.model,
                k.scheme.to_string(),
                k.k,
                k.variant.name(),
                k.angular_sigma,
                k.outlier_rate,
                k.occlusion,
                truncation_label(&k.truncation),
                100.0 * c.proj2d_rate(),
                100.0 * add.success_rate,
                add.auc.unwrap_or(f64::NAN),
            );
        }
        out
    }

    /// Writes `results.csv` and `results.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), ExperimentError> {
        let io = |path: PathBuf| move |source| ExperimentError::Io { path, source };
        std::fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let csv_path = dir.join("results.csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(io(csv_path.clone()))?;
        let json_path = dir.join("results.json");
        std::fs::write(&json_path, self.to_json()).map_err(io(json_path.clone()))?;
        Ok(())
    }

    pub fn find(&self, pred: impl Fn(&CellKey) -> bool) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| pred(&c.key)).collect()
    }
}

struct PreparedModel {
    label: String,
    model: ObjectModel,
    diameter: f64,
    symmetric: bool,
    keypoints: Vec<KeypointSet>,
}

fn prepare_models(cfg: &ExperimentConfig) -> Result<Vec<PreparedModel>, ExperimentError> {
    cfg.models
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let model = match &spec.path {
                Some(p) => load_model(p).map_err(|source| ExperimentError::Model {
                    path: format!("models[{i}].path"),
                    source,
                })?,
                None => shapes::builtin(spec.name.as_deref().unwrap_or_default()).ok_or_else(|| {
                    ConfigError::invalid(format!("models[{i}].name"), "unknown builtin model")
                })?,
            };
            let keypoints = cfg
                .keypoints
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    k.build(&model).map_err(|source| ExperimentError::Model {
                        path: format!("keypoints[{j}] on models[{i}]"),
                        source,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let diameter = model_diameter(&model).value();
            Ok(PreparedModel {
                label: spec.label(),
                model,
                diameter,
                symmetric: spec.symmetric,
                keypoints,
            })
        })
        .collect()
}

/// Scene-defining indices of one trial; keypoints and variant are excluded.
#[derive(Clone, Copy)]
struct SceneIndex {
    model: usize,
    noise: usize,
    occlusion: usize,
    truncation: usize,
    trial: usize,
}

impl SceneIndex {
    fn seed(&self, master: u64) -> u64 {
        derive_seed(
            master,
            &[
                self.model as u64,
                self.noise as u64,
                self.occlusion as u64,
                self.truncation as u64,
                self.trial as u64,
            ],
        )
    }
}

/// Runs one scene and every PnP variant on it.
fn run_trial(
    cfg: &ExperimentConfig,
    pm: &PreparedModel,
    kps: &KeypointSet,
    idx: SceneIndex,
) -> Vec<TrialRecord> {
    let seed = idx.seed(cfg.seed);
    let noise = cfg.noise[idx.noise];
    let scene_cfg = SceneConfig {
        intrinsics: cfg.intrinsics,
        pose: cfg.pose_sampler,
        occlusion: cfg.occlusion[idx.occlusion],
        truncation: cfg.truncation[idx.truncation],
        noise: NoiseConfig::new(noise.angular_sigma, noise.outlier_rate, 0),
    };
    let fail_all = |msg: String| {
        cfg.variants
            .iter()
            .map(|_| TrialRecord::failed(idx.trial, seed, msg.clone()))
            .collect()
    };
    let scene = match synth_scene(&pm.model, kps, &scene_cfg, seed) {
        Ok(s) => s,
        Err(e) => return fail_all(format!("scene: {e}")),
    };
    let vcfg = VotingConfig {
        num_hypotheses: cfg.voting.num_hypotheses,
        inlier_threshold: cfg.voting.inlier_threshold,
        seed: derive_seed(seed, &[2]),
        cov_epsilon: cfg.voting.cov_epsilon,
    };
    let dists = match vote_all(&scene.mask, &scene.field, &vcfg) {
        Ok(d) => d,
        Err(e) => return fail_all(format!("voting: {e}")),
    };
    let kp_err = dists
        .iter()
        .zip(&scene.keypoints2d_gt)
        .map(|(d, g)| (d.mean - g).norm())
        .sum::<f64>()
        / dists.len() as f64;
    let corrs: Vec<Correspondence> = kps
        .points3d
        .iter()
        .zip(dists)
        .map(|(x, d)| Correspondence::new(*x, d))
        .collect();

    cfg.variants
        .iter()
        .map(|&variant| {
            let res = match solve_with_variant(&corrs, &scene.intr, variant, &cfg.pnp) {
                Ok(r) => r,
                Err(e) => return TrialRecord::failed(idx.trial, seed, format!("pnp: {e}")),
            };
            let report = evaluate_pose(
                &res.pose,
                &scene.gt_pose,
                &pm.model.surface_points,
                pm.diameter,
                &scene.intr,
                pm.symmetric,
            );
            let mut rec = TrialRecord {
                trial: idx.trial,
                seed,
                error: None,
                proj2d_error: None,
                proj2d_correct: false,
                add_value: None,
                add_correct: false,
                rotation_error_deg: Some(res.pose.rotation_error(&scene.gt_pose).to_degrees()),
                translation_error: Some(res.pose.translation_error(&scene.gt_pose)),
                converged: res.converged,
                iterations: res.iterations,
                mean_keypoint_error: Some(kp_err),
            };
            match report {
                Ok(m) => {
                    rec.proj2d_error = Some(m.proj2d.error);
                    rec.proj2d_correct = m.proj2d.correct;
                    rec.add_value = Some(m.add.value);
                    rec.add_correct = m.add.correct;
                }
                // The estimate put part of the model behind the camera.
                Err(e) => {
                    rec.error = Some(format!("metric: {e}"));
                    rec.add_value = Some(crate::eval::metrics::add_value(&res.pose, &scene.gt_pose, &pm.model.surface_points));
                }
            }
            rec
        })
        .collect()
}

fn summarize(name: &str, trials: &[TrialRecord], pick: impl Fn(&TrialRecord) -> (Option<f64>, bool), auc_max: Option<f64>) -> MetricSummary {
    let n = trials.len();
    let successes = trials.iter().filter(|t| pick(t).1).count();
    let values: Vec<f64> = trials.iter().filter_map(|t| pick(t).0).collect();
    let (mean, std) = if values.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
        (m, var.sqrt())
    };
    // Trials without a pose score as infinitely wrong.
    let auc = auc_max.map(|m| {
        let all: Vec<f64> = trials.iter().map(|t| pick(t).0.unwrap_or(f64::INFINITY)).collect();
        metric_auc(&all, m)
    });
    MetricSummary {
        metric: name.to_string(),
        trials: n,
        successes,
        success_rate: successes as f64 / n as f64,
        mean,
        std,
        auc,
    }
}

/// Runs every cell of the grid. Output is independent of thread count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let models = prepare_models(cfg)?;

    // One job per (model, keypoints, noise, occlusion, truncation, trial).
    let mut jobs = Vec::new();
    for (mi, _) in models.iter().enumerate() {
        for ki in 0..cfg.keypoints.len() {
            for ni in 0..cfg.noise.len() {
                for oi in 0..cfg.occlusion.len() {
                    for ti in 0..cfg.truncation.len() {
                        for trial in 0..cfg.trials {
                            jobs.push((
                                ki,
                                SceneIndex {
                                    model: mi,
                                    noise: ni,
                                    occlusion: oi,
                                    truncation: ti,
                                    trial,
                                },
                            ));
                        }
                    }
                }
            }
        }
    }
    let outputs: Vec<Vec<TrialRecord>> = jobs
        .par_iter()
        .map(|&(ki, idx)| {
            let pm = &models[idx.model];
            run_trial(cfg, pm, &pm.keypoints[ki], idx)
        })
        .collect();

    // (model, keypoints, variant, noise, occlusion, truncation)
    type AxisIndex = (usize, usize, usize, usize, usize, usize);
    let mut grouped: BTreeMap<AxisIndex, Vec<TrialRecord>> = BTreeMap::new();
    for (&(ki, idx), recs) in jobs.iter().zip(outputs) {
        for (vi, rec) in recs.into_iter().enumerate() {
            grouped
                .entry((idx.model, ki, vi, idx.noise, idx.occlusion, idx.truncation))
                .or_default()
                .push(rec);
        }
    }

    let cells = grouped
        .into_iter()
        .map(|((mi, ki, vi, ni, oi, ti), trials)| {
            let pm = &models[mi];
            let kind = if pm.symmetric { MetricKind::AddS } else { MetricKind::Add };
            let metrics = vec![
                summarize("proj2d", &trials, |t| (t.proj2d_error, t.proj2d_correct), None),
                summarize(kind.name(), &trials, |t| (t.add_value, t.add_correct), Some(cfg.auc_max_threshold)),
            ];
            CellResult {
                key: CellKey {
                    model: pm.label.clone(),
                    scheme: cfg.keypoints[ki].scheme,
                    k: cfg.keypoints[ki].count(),
                    variant: cfg.variants[vi],
                    angular_sigma: cfg.noise[ni].angular_sigma,
                    outlier_rate: cfg.noise[ni].outlier_rate,
                    occlusion: cfg.occlusion[oi],
                    truncation: cfg.truncation[ti],
                },
                metrics,
                trials,
            }
        })
        .collect();
    Ok(ExperimentReport {
        config: cfg.clone(),
        cells,
    })
}
