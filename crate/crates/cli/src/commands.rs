use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use keyvote::eval::experiment::{parse_config, run_experiment, ExperimentConfig, KeypointSpec, ModelSpec, NoiseSpec};
use keyvote::eval::scene::{synth_scene, SceneConfig, TruncationConfig, TruncationInfo};
use keyvote::field::{NoiseConfig, SegmentationMask, VectorField};
use keyvote::geometry::{CameraIntrinsics, Pose};
use keyvote::model::{bbox_corners, fps_select, load_model, shapes, KeypointScheme, KeypointSet, ObjectModel};
use keyvote::pnp::{solve_with_variant, Correspondence, PnpConfig, PnpResultJson, PnpVariant};
use keyvote::voting::{vote_all, DistributionJson, KeypointDistribution, VotingConfig};
use serde::Serialize;

use crate::args::{BenchArgs, IntrinsicsArgs, KeypointsArgs, ModelArgs, PoseArgs, SynthArgs, VoteArgs};
use crate::error::{model_error, CliError};

const BUILTIN_PREFIX: &str = "builtin:";

fn load_object(spec: &str) -> Result<ObjectModel, CliError> {
    match spec.strip_prefix(BUILTIN_PREFIX) {
        Some(name) => shapes::builtin(name).ok_or_else(|| CliError::Usage(format!("unknown builtin model '{name}'"))),
        None => {
            let path = Path::new(spec);
            load_model(path).map_err(|e| model_error(path, e))
        }
    }
}

fn select_keypoints(args: &ModelArgs, model: &ObjectModel) -> Result<KeypointSet, CliError> {
    match KeypointScheme::from(args.scheme) {
        KeypointScheme::Fps => fps_select(model, args.k).map_err(|e| model_error(Path::new(&args.model), e)),
        KeypointScheme::Bbox => Ok(bbox_corners(model)),
    }
}

fn read_keypoints(path: &Path) -> Result<KeypointSet, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    KeypointSet::from_json(&text).map_err(|e| model_error(path, e))
}

fn read_field(path: &Path) -> Result<VectorField, CliError> {
    let f = File::open(path).map_err(CliError::io(path))?;
    VectorField::read_binary(BufReader::new(f)).map_err(|e| CliError::input(path, e))
}

fn read_mask(path: &Path) -> Result<SegmentationMask, CliError> {
    let f = File::open(path).map_err(CliError::io(path))?;
    SegmentationMask::read_pgm(BufReader::new(f)).map_err(|e| CliError::input(path, e))
}

/// Writes `text` plus a newline to `out`, or to stdout when unset.
fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, format!("{text}\n")).map_err(CliError::io(path)),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            writeln!(lock, "{text}").map_err(CliError::io(Path::new("<stdout>")))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output types serialize")
}

fn checked_voting(cfg: VotingConfig) -> Result<VotingConfig, CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn checked_intrinsics(args: &IntrinsicsArgs) -> Result<CameraIntrinsics, CliError> {
    let intr = args.resolve();
    intr.validate()?;
    Ok(intr)
}

pub fn keypoints(args: &KeypointsArgs) -> Result<(), CliError> {
    let model = load_object(&args.model.model)?;
    let kps = select_keypoints(&args.model, &model)?;
    emit(args.out.as_deref(), &kps.to_json())
}

#[derive(Serialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

impl From<&Pose> for PoseJson {
    fn from(p: &Pose) -> Self {
        let m = &p.rotation;
        Self {
            r: [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]),
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

/// Ground truth written next to a synthesized field and mask.
#[derive(Serialize)]
struct SceneJson {
    seed: u64,
    intrinsics: CameraIntrinsics,
    gt_pose: PoseJson,
    keypoints2d: Vec<[f64; 2]>,
    noise: NoiseConfig,
    occluded_fraction: f64,
    truncation: Option<TruncationInfo>,
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let intrinsics = checked_intrinsics(&args.intrinsics)?;
    let cfg = SceneConfig {
        intrinsics,
        occlusion: args.scene.occlusion,
        truncation: args.scene.truncate.then(TruncationConfig::default),
        noise: NoiseConfig::new(args.scene.sigma, args.scene.outlier_rate, 0),
        ..SceneConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let model = load_object(&args.model.model)?;
    let kps = match &args.keypoints {
        Some(path) => read_keypoints(path)?,
        None => select_keypoints(&args.model, &model)?,
    };
    let scene = synth_scene(&model, &kps, &cfg, args.seed)?;

    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let field_path = dir.join("field.bin");
    let mut w = BufWriter::new(File::create(&field_path).map_err(CliError::io(&field_path))?);
    scene
        .field
        .write_binary(&mut w)
        .and_then(|()| w.flush())
        .map_err(CliError::io(&field_path))?;
    let mask_path = dir.join("mask.pgm");
    let mut w = BufWriter::new(File::create(&mask_path).map_err(CliError::io(&mask_path))?);
    scene
        .mask
        .write_pgm(&mut w)
        .and_then(|()| w.flush())
        .map_err(CliError::io(&mask_path))?;
    let kp_path = dir.join("keypoints.json");
    fs::write(&kp_path, kps.to_json()).map_err(CliError::io(&kp_path))?;
    let gt = SceneJson {
        seed: args.seed,
        intrinsics: scene.intr,
        gt_pose: PoseJson::from(&scene.gt_pose),
        keypoints2d: scene.keypoints2d_gt.iter().map(|p| [p.x, p.y]).collect(),
        noise: scene.noise,
        occluded_fraction: scene.occluded_fraction,
        truncation: scene.truncation,
    };
    let scene_path = dir.join("scene.json");
    fs::write(&scene_path, to_json(&gt)).map_err(CliError::io(&scene_path))?;
    println!(
        "wrote {} ({} object pixels, {} keypoint channels)",
        dir.display(),
        scene.mask.count(),
        scene.field.k()
    );
    Ok(())
}

fn load_field_and_mask(field: &Path, mask: &Path) -> Result<(VectorField, SegmentationMask), CliError> {
    let field = read_field(field)?;
    let mask = read_mask(mask)?;
    field.check_mask(&mask)?;
    Ok((field, mask))
}

fn distributions_json(dists: &[KeypointDistribution]) -> Vec<DistributionJson> {
    dists.iter().enumerate().map(|(k, d)| d.to_json_value(k)).collect()
}

pub fn vote(args: &VoteArgs) -> Result<(), CliError> {
    let cfg = checked_voting(args.voting.config())?;
    let (field, mask) = load_field_and_mask(&args.field, &args.mask)?;
    let dists = vote_all(&mask, &field, &cfg)?;
    emit(args.out.as_deref(), &to_json(&distributions_json(&dists)))
}

#[derive(Serialize)]
struct PoseOutput {
    variant: PnpVariant,
    pose: PnpResultJson,
    distributions: Vec<DistributionJson>,
}

pub fn pose(args: &PoseArgs) -> Result<(), CliError> {
    let cfg = checked_voting(args.voting.config())?;
    let (field, mask) = load_field_and_mask(&args.field, &args.mask)?;
    let kps = read_keypoints(&args.keypoints)?;
    if kps.points3d.len() != field.k() {
        return Err(CliError::Usage(format!(
            "{} has {} points (center + {}) but the field has {} channels",
            args.keypoints.display(),
            kps.points3d.len(),
            kps.k(),
            field.k()
        )));
    }
    let mut intr_args = IntrinsicsArgs { ..args.intrinsics };
    intr_args.width = intr_args.width.or(Some(field.width()));
    intr_args.height = intr_args.height.or(Some(field.height()));
    let intr = checked_intrinsics(&intr_args)?;

    let dists = vote_all(&mask, &field, &cfg)?;
    let summary = distributions_json(&dists);
    let corrs: Vec<Correspondence> = kps
        .points3d
        .iter()
        .zip(dists)
        .map(|(x, d)| Correspondence::new(*x, d))
        .collect();
    let variant = PnpVariant::from(args.variant);
    let result = solve_with_variant(&corrs, &intr, variant, &PnpConfig::default())?;
    let out = PoseOutput {
        variant,
        pose: result.to_json_value(),
        distributions: summary,
    };
    emit(args.out.as_deref(), &to_json(&out))
}

fn bench_config(args: &BenchArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(CliError::io(path))?;
            parse_config(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => {
            let spec = args.model.as_deref().expect("clap requires --model without --config");
            let model = match spec.strip_prefix(BUILTIN_PREFIX) {
                Some(name) => ModelSpec::builtin(name),
                None => ModelSpec {
                    name: None,
                    path: Some(PathBuf::from(spec)),
                    symmetric: false,
                },
            };
            let keypoints = match args.scheme.map(KeypointScheme::from) {
                Some(KeypointScheme::Bbox) => KeypointSpec::bbox(),
                _ => KeypointSpec::fps(args.k.unwrap_or(8)),
            };
            let mut cfg = ExperimentConfig::single(model, keypoints, PnpVariant::Uncertainty, args.trials.unwrap_or(100), 0);
            cfg.variants = match args.variant {
                Some(v) => vec![v.into()],
                None => PnpVariant::ALL.to_vec(),
            };
            cfg.noise = vec![NoiseSpec {
                angular_sigma: args.sigma.unwrap_or(0.0),
                outlier_rate: args.outlier_rate.unwrap_or(0.0),
            }];
            cfg.occlusion = vec![args.occlusion.unwrap_or(0.0)];
            cfg.truncation = vec![args.truncate.then(TruncationConfig::default)];
            if let Some(n) = args.n_hyps {
                cfg.voting.num_hypotheses = n;
            }
            if let Some(t) = args.theta {
                cfg.voting.inlier_threshold = t;
            }
            cfg
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let cfg = bench_config(args)?;
    let report = run_experiment(&cfg)?;
    report.write_to(&args.out_dir)?;
    print!("{}", report.summary_table());
    println!(
        "wrote {} and {}",
        args.out_dir.join("results.csv").display(),
        args.out_dir.join("results.json").display()
    );
    Ok(())
}
