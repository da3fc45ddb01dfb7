//! Acceptance suite. Every criterion prints one PASS/FAIL line; the test
//! fails afterwards if any criterion failed.
//!
//! Run with `cargo test --release -p keyvote --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use keyvote::eval::derive_seed;
use keyvote::eval::experiment::{parse_config, run_experiment, CellResult, ExperimentConfig, ExperimentReport, KeypointSpec, ModelSpec, NoiseSpec};
use keyvote::eval::metrics::metric_2d_projection;
use keyvote::eval::scene::{synth_scene, SceneConfig, TruncationConfig};
use keyvote::field::{NoiseConfig, SegmentationMask, VectorField};
use keyvote::geometry::{project, rotation_exp, CameraIntrinsics, Pose, RotationVector};
use keyvote::model::{fps_select, shapes, KeypointScheme, ObjectModel};
use keyvote::pnp::{
    apply_update, solve_pose, whiten, whitened_jacobian, whitened_residuals, Correspondence, PnpConfig, PnpVariant,
};
use keyvote::voting::{
    estimate_distribution, generate_hypotheses, keypoint_rng, score_hypotheses, vote_all, Hypothesis, VotingConfig,
    ATTEMPTS_PER_HYPOTHESIS, PARALLEL_TOL,
};
use nalgebra::{DMatrix, Matrix2, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const STANDARD_SUITE: &str = include_str!("../../../docs/standard_suite.json");
const MODELS: [&str; 3] = ["cube", "blob", "bracket"];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn models() -> Vec<ObjectModel> {
    MODELS.iter().map(|m| shapes::builtin(m).unwrap()).collect()
}

// ---------------------------------------------------------------------------

fn noiseless_exactness() -> Outcome {
    let models = models();
    let kps: Vec<_> = models.iter().map(|m| fps_select(m, 8).unwrap()).collect();
    let cfg = SceneConfig::default();
    let start = Instant::now();
    let (mut worst_kp, mut worst_rot, mut worst_trans_rel) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    single_threaded(|| {
        for i in 0..100u64 {
            let m = i as usize % models.len();
            let scene = synth_scene(&models[m], &kps[m], &cfg, derive_seed(11, &[i])).unwrap();
            let vcfg = VotingConfig {
                seed: i,
                ..VotingConfig::default()
            };
            let dists = vote_all(&scene.mask, &scene.field, &vcfg).unwrap();
            for (d, gt) in dists.iter().zip(&scene.keypoints2d_gt) {
                worst_kp = worst_kp.max((d.mean - gt).norm());
            }
            let corrs: Vec<_> = kps[m].points3d.iter().zip(dists).map(|(x, d)| Correspondence::new(*x, d)).collect();
            match solve_pose(&corrs, &scene.intr, &PnpConfig::default()) {
                Ok(res) => {
                    worst_rot = worst_rot.max(res.pose.rotation_error(&scene.gt_pose).to_degrees());
                    let depth = scene.gt_pose.translation.z;
                    worst_trans_rel = worst_trans_rel.max(res.pose.translation_error(&scene.gt_pose) / depth);
                }
                Err(_) => failures += 1,
            }
        }
    });
    let elapsed = start.elapsed();
    let pass = failures == 0
        && worst_kp < 1e-3
        && worst_rot < 0.01
        && worst_trans_rel < 1e-4
        && elapsed < Duration::from_secs(30);
    Outcome::new(
        pass,
        format!(
            "100 scenes: max keypoint error {worst_kp:.2e} px, max rotation error {worst_rot:.2e} deg, \
             max translation error {:.2e}% of depth, {failures} failures, {:.1} s",
            worst_trans_rel * 100.0,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

/// Direct transcription of the voting rules with no shared code beyond the RNG stream.
struct NaiveVoting {
    hypotheses: Vec<Vector2<f64>>,
    weights: Vec<u32>,
    mean: Vector2<f64>,
    covariance: Matrix2<f64>,
}

fn naive_vote(mask: &SegmentationMask, field: &VectorField, k: usize, cfg: &VotingConfig) -> NaiveVoting {
    let mut pixels = Vec::new();
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            let v = field.get(col, row, k);
            if mask.get(col, row) != 0 && (v.x != 0.0 || v.y != 0.0) {
                pixels.push((Vector2::new(col as f64, row as f64), v));
            }
        }
    }
    let m = pixels.len();
    let mut rng = keypoint_rng(cfg.seed, k);
    let mut hypotheses = Vec::new();
    let mut attempts = 0;
    while hypotheses.len() < cfg.num_hypotheses && attempts < ATTEMPTS_PER_HYPOTHESIS * cfg.num_hypotheses {
        attempts += 1;
        let i = rng.random_range(0..m);
        let mut j = rng.random_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        let ((p1, v1), (p2, v2)) = (pixels[i], pixels[j]);
        // p1 + t v1 = p2 + s v2
        let a = Matrix2::new(v1.x, -v2.x, v1.y, -v2.y);
        let det = v1.x * v2.y - v1.y * v2.x;
        if det.abs() <= PARALLEL_TOL * v1.norm() * v2.norm() {
            continue;
        }
        let ts = a.try_inverse().unwrap() * (p2 - p1);
        if ts.x > 0.0 && ts.y > 0.0 {
            hypotheses.push(p1 + v1 * ts.x);
        }
    }
    let weights: Vec<u32> = hypotheses
        .iter()
        .map(|h| {
            pixels
                .iter()
                .filter(|(p, v)| {
                    let d = h - p;
                    d.norm() > 0.0 && d.dot(v) / (d.norm() * v.norm()) >= cfg.inlier_threshold
                })
                .count() as u32
        })
        .collect();
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut mean = Vector2::zeros();
    for (h, &w) in hypotheses.iter().zip(&weights) {
        mean += h * w as f64;
    }
    mean /= total;
    let mut covariance = Matrix2::zeros();
    for (h, &w) in hypotheses.iter().zip(&weights) {
        let d = h - mean;
        covariance += d * d.transpose() * w as f64;
    }
    covariance /= total;
    covariance += Matrix2::identity() * cfg.cov_epsilon;
    NaiveVoting {
        hypotheses,
        weights,
        mean,
        covariance,
    }
}

fn random_small_case(rng: &mut ChaCha8Rng) -> (SegmentationMask, VectorField) {
    let labels = (0..64).map(|_| u8::from(rng.random_bool(0.7))).collect();
    let mask = SegmentationMask::from_labels(8, 8, labels).unwrap();
    let mut field = VectorField::zeros(8, 8, 2);
    let kps = [
        Vector2::new(rng.random_range(-4.0..12.0), rng.random_range(-4.0..12.0)),
        Vector2::new(rng.random_range(-4.0..12.0), rng.random_range(-4.0..12.0)),
    ];
    for row in 0..8 {
        for col in 0..8 {
            for (k, x) in kps.iter().enumerate() {
                let d = x - Vector2::new(col as f64, row as f64);
                let a = d.y.atan2(d.x) + 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                field.set(col, row, k, Vector2::new(a.cos(), a.sin()));
            }
        }
    }
    (mask, field)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut cases, mut weight_mismatch, mut worst_loc, mut worst_moment) = (0, 0, 0.0f64, 0.0f64);
    let mut hyp_count_mismatch = 0;
    while cases < 200 {
        let (mask, field) = random_small_case(&mut rng);
        if mask.count() < 2 {
            continue;
        }
        cases += 1;
        for k in 0..2 {
            let cfg = VotingConfig {
                num_hypotheses: 32,
                seed: cases as u64,
                ..VotingConfig::default()
            };
            let naive = naive_vote(&mask, &field, k, &cfg);
            let hyps = generate_hypotheses(&mask, &field, k, &cfg).unwrap();
            if hyps.len() != naive.hypotheses.len() {
                hyp_count_mismatch += 1;
                continue;
            }
            for (h, n) in hyps.iter().zip(&naive.hypotheses) {
                worst_loc = worst_loc.max((h.location - n).norm() / (1.0 + n.norm()));
            }
            let scored = score_hypotheses(&mask, &field, k, &hyps, cfg.inlier_threshold).unwrap();
            weight_mismatch += scored
                .iter()
                .zip(&naive.weights)
                .filter(|(h, &w)| h.weight != w as f64)
                .count();
            if naive.weights.iter().all(|&w| w == 0) {
                continue;
            }
            // Moments from identical inputs isolate the estimator from location rounding.
            let exact: Vec<Hypothesis> = naive
                .hypotheses
                .iter()
                .zip(&naive.weights)
                .map(|(h, &w)| Hypothesis::new(*h, w as f64))
                .collect();
            let dist = estimate_distribution(&exact, cfg.cov_epsilon).unwrap();
            let scale = 1.0 + naive.mean.norm() + naive.covariance.norm();
            worst_moment = worst_moment
                .max((dist.mean - naive.mean).norm() / scale)
                .max((dist.covariance - naive.covariance).norm() / scale);
        }
    }
    let pass = hyp_count_mismatch == 0 && weight_mismatch == 0 && worst_loc < 1e-9 && worst_moment < 1e-9;
    Outcome::new(
        pass,
        format!(
            "{cases} random 8x8 masks x 2 channels: {hyp_count_mismatch} hypothesis-count mismatches, \
             {weight_mismatch} weight mismatches, max location diff {worst_loc:.1e}, max moment diff {worst_moment:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn truncation() -> Outcome {
    let models = models();
    let kps: Vec<_> = models.iter().map(|m| fps_select(m, 8).unwrap()).collect();
    let cfg = SceneConfig {
        truncation: Some(TruncationConfig {
            min_keypoints_outside: 2,
            ..TruncationConfig::default()
        }),
        ..SceneConfig::default()
    };
    let (mut ok, mut bad_crop, mut worst_err) = (0, 0, 0.0f64);
    let mut errors = Vec::new();
    for i in 0..100u64 {
        let m = i as usize % models.len();
        let scene = match synth_scene(&models[m], &kps[m], &cfg, derive_seed(31, &[i])) {
            Ok(s) => s,
            Err(e) => {
                errors.push(format!("scene {i}: {e}"));
                continue;
            }
        };
        let info = scene.truncation.unwrap();
        if info.keypoints_outside < 2 || !(0.4..=0.6).contains(&info.visible_fraction) {
            bad_crop += 1;
        }
        let vcfg = VotingConfig {
            seed: i,
            ..VotingConfig::default()
        };
        let pose = vote_all(&scene.mask, &scene.field, &vcfg).map_err(|e| e.to_string()).and_then(|dists| {
            let corrs: Vec<_> = kps[m].points3d.iter().zip(dists).map(|(x, d)| Correspondence::new(*x, d)).collect();
            solve_pose(&corrs, &scene.intr, &PnpConfig::default()).map_err(|e| e.to_string())
        });
        match pose {
            Ok(res) => {
                let metric = metric_2d_projection(&res.pose, &scene.gt_pose, &models[m].surface_points, &scene.intr);
                match metric {
                    Ok(p) => {
                        worst_err = worst_err.max(p.error);
                        ok += usize::from(p.correct);
                    }
                    Err(e) => errors.push(format!("scene {i}: {e}")),
                }
            }
            Err(e) => errors.push(format!("scene {i}: {e}")),
        }
    }
    Outcome::new(
        ok == 100 && bad_crop == 0,
        format!(
            "{ok}/100 correct under 2D projection, max error {worst_err:.2e} px, {bad_crop} crops out of spec{}",
            if errors.is_empty() { String::new() } else { format!(", errors: {errors:?}") }
        ),
    )
}

// ---------------------------------------------------------------------------

fn builtin_config(keypoints: Vec<KeypointSpec>, variants: Vec<PnpVariant>, trials: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::single(ModelSpec::builtin("cube"), keypoints[0], variants[0], trials, seed);
    cfg.models = MODELS.iter().map(|m| ModelSpec::builtin(m)).collect();
    cfg.keypoints = keypoints;
    cfg.variants = variants;
    cfg
}

/// Pools the trials of every cell matching `pred` across models.
fn pooled(report: &ExperimentReport, pred: impl Fn(&CellResult) -> bool) -> Vec<&CellResult> {
    report.cells.iter().filter(|c| pred(c)).collect()
}

fn rate(cells: &[&CellResult], correct: impl Fn(&keyvote::eval::experiment::TrialRecord) -> bool) -> (usize, usize) {
    let n = cells.iter().map(|c| c.trials.len()).sum();
    let s = cells.iter().flat_map(|c| c.trials.iter()).filter(|t| correct(t)).count();
    (s, n)
}

fn occlusion() -> Outcome {
    const LEVELS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    // 67 trials per model, 201 scenes per occlusion level.
    let mut cfg = builtin_config(vec![KeypointSpec::fps(8)], vec![PnpVariant::Uncertainty], 67, 41);
    cfg.noise = vec![NoiseSpec {
        angular_sigma: 0.05,
        outlier_rate: 0.1,
    }];
    cfg.occlusion = LEVELS.to_vec();
    let report = run_experiment(&cfg).unwrap();
    let curve: Vec<(f64, usize, usize)> = LEVELS
        .iter()
        .map(|&o| {
            let (s, n) = rate(&pooled(&report, |c| c.key.occlusion == o), |t| t.proj2d_correct);
            (o, s, n)
        })
        .collect();
    let rates: Vec<f64> = curve.iter().map(|&(_, s, n)| s as f64 / n as f64).collect();
    let monotone = rates.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let at_half = *rates.last().unwrap();
    let text: Vec<String> = curve.iter().map(|&(o, s, n)| format!("{o:.1}:{s}/{n}")).collect();
    Outcome::new(
        at_half >= 0.9 && monotone,
        format!(
            "2D projection success by occlusion [{}]; 50% occlusion {:.1}%, monotone within 2%: {monotone}",
            text.join(" "),
            at_half * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------

fn standard_suite() -> ExperimentReport {
    let cfg = parse_config(STANDARD_SUITE).unwrap();
    run_experiment(&cfg).unwrap()
}

fn is_kp(c: &CellResult, scheme: KeypointScheme, k: usize) -> bool {
    c.key.scheme == scheme && c.key.k == k
}

fn add_rate(report: &ExperimentReport, scheme: KeypointScheme, k: usize, variant: PnpVariant) -> (usize, usize) {
    rate(&pooled(report, |c| is_kp(c, scheme, k) && c.key.variant == variant), |t| t.add_correct)
}

fn pct((s, n): (usize, usize)) -> f64 {
    100.0 * s as f64 / n as f64
}

fn ablation(report: &ExperimentReport) -> Outcome {
    let bbox8 = add_rate(report, KeypointScheme::Bbox, 8, PnpVariant::EpnpOnly);
    let fps8 = add_rate(report, KeypointScheme::Fps, 8, PnpVariant::EpnpOnly);
    let fps8_un = add_rate(report, KeypointScheme::Fps, 8, PnpVariant::Uncertainty);
    let fps8_iso = add_rate(report, KeypointScheme::Fps, 8, PnpVariant::Isotropic);

    let cells = |v: PnpVariant| pooled(report, move |c| is_kp(c, KeypointScheme::Fps, 8) && c.key.variant == v);
    let (un, iso) = (cells(PnpVariant::Uncertainty), cells(PnpVariant::Isotropic));
    let (mut wins, mut total) = (0, 0);
    for (cu, ci) in un.iter().zip(&iso) {
        assert_eq!(cu.key.model, ci.key.model);
        for (tu, ti) in cu.trials.iter().zip(&ci.trials) {
            assert_eq!(tu.seed, ti.seed);
            total += 1;
            let (a, b) = (tu.add_value.unwrap_or(f64::INFINITY), ti.add_value.unwrap_or(f64::INFINITY));
            wins += usize::from(a < b);
        }
    }
    let win_rate = wins as f64 / total as f64;
    let pass = fps8.0 >= bbox8.0 && fps8_un.0 >= fps8.0 && win_rate >= 0.6;
    Outcome::new(
        pass,
        format!(
            "ADD success: BBox 8 {:.1}%, FPS 8 {:.1}%, FPS 8 + uncertainty {:.1}% (isotropic {:.1}%); \
             uncertainty beats isotropic ADD on {wins}/{total} trials ({:.1}%)",
            pct(bbox8),
            pct(fps8),
            pct(fps8_un),
            pct(fps8_iso),
            win_rate * 100.0
        ),
    )
}

fn keypoint_count(report: &ExperimentReport) -> Outcome {
    let epnp = |k| add_rate(report, KeypointScheme::Fps, k, PnpVariant::EpnpOnly);
    let un = |k| add_rate(report, KeypointScheme::Fps, k, PnpVariant::Uncertainty);
    let (f4, f8, f12) = (epnp(4), epnp(8), epnp(12));
    let (u4, u8, u12) = (un(4), un(8), un(12));
    Outcome::new(
        f8.0 >= f4.0,
        format!(
            "ADD success (EPnP): FPS 4 {:.1}%, FPS 8 {:.1}%, FPS 12 {:.1}%, |FPS 12 - FPS 8| = {:.1} points; \
             with uncertainty PnP: {:.1}% / {:.1}% / {:.1}%",
            pct(f4),
            pct(f8),
            pct(f12),
            (pct(f12) - pct(f8)).abs(),
            pct(u4),
            pct(u8),
            pct(u12)
        ),
    )
}

// ---------------------------------------------------------------------------

fn jacobian() -> Outcome {
    let intr = CameraIntrinsics::linemod();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let w = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let pose = Pose {
            rotation: rotation_exp(&RotationVector(w)),
            translation: Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(500.0..1500.0)),
        };
        let n = rng.random_range(4..12);
        let corrs: Vec<_> = (0..n)
            .map(|_| {
                let x = Vector3::from_fn(|_, _| rng.random_range(-80.0..80.0));
                let uv = project(&intr, &pose, &x).unwrap() + Vector2::from_fn(|_, _| rng.random_range(-5.0..5.0));
                let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-3.0..3.0));
                let cov = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
                let cov = Matrix2::new(cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]);
                Correspondence::new(x, keyvote::voting::KeypointDistribution::from_moments(uv, cov))
            })
            .collect();
        let obs = whiten(&corrs).unwrap();
        let analytic = whitened_jacobian(&pose, &obs, &intr).unwrap();
        let mut numeric = DMatrix::zeros(analytic.nrows(), 6);
        for c in 0..6 {
            let h = if c < 3 { 1e-6 } else { 1e-4 };
            let mut d = Vector6::zeros();
            d[c] = h;
            let rp = whitened_residuals(&apply_update(&pose, &d), &obs, &intr).unwrap();
            let rm = whitened_residuals(&apply_update(&pose, &(-d)), &obs, &intr).unwrap();
            numeric.set_column(c, &((rp - rm) / (2.0 * h)));
        }
        worst = worst.max((&numeric - &analytic).norm() / analytic.norm());
    }
    Outcome::new(worst < 1e-4, format!("100 configurations, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------

fn min_pairwise(points: &[Vector3<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min((points[i] - points[j]).norm());
        }
    }
    best
}

/// Best dispersion over every `k`-subset, with the center always included.
fn best_dispersion(center: Vector3<f64>, points: &[Vector3<f64>], k: usize) -> f64 {
    fn recurse(points: &[Vector3<f64>], start: usize, k: usize, chosen: &mut Vec<Vector3<f64>>, best: &mut f64) {
        if chosen.len() == k + 1 {
            *best = best.max(min_pairwise(chosen));
            return;
        }
        for i in start..points.len() {
            chosen.push(points[i]);
            recurse(points, i + 1, k, chosen, best);
            chosen.pop();
        }
    }
    let mut best = 0.0;
    recurse(points, 0, k, &mut vec![center], &mut best);
    best
}

fn fps_approximation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (mut checked, mut violations, mut worst_ratio) = (0, 0, f64::INFINITY);
    for _ in 0..50 {
        let n = rng.random_range(5..=12);
        let points: Vec<_> = (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let model = ObjectModel::new("cloud", points.clone()).unwrap();
        for k in 1..=4 {
            let kps = fps_select(&model, k).unwrap();
            let greedy = min_pairwise(&kps.points3d);
            let best = best_dispersion(model.center(), &points, k);
            checked += 1;
            worst_ratio = worst_ratio.min(greedy / best);
            if 2.0 * greedy < best * (1.0 - 1e-12) {
                violations += 1;
            }
        }
    }
    Outcome::new(
        violations == 0,
        format!("{checked} (cloud, K) pairs, {violations} violations, worst greedy/optimal ratio {worst_ratio:.3}"),
    )
}

// ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut cfg = builtin_config(
        vec![KeypointSpec::fps(8), KeypointSpec::bbox()],
        PnpVariant::ALL.to_vec(),
        4,
        71,
    );
    cfg.noise = vec![NoiseSpec {
        angular_sigma: 0.03,
        outlier_rate: 0.1,
    }];
    cfg.occlusion = vec![0.0, 0.3];
    cfg.truncation = vec![None, Some(TruncationConfig::default())];
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_experiment(&cfg).unwrap().to_csv())
    };
    let reference = run(1);
    let mismatched: Vec<usize> = [1, 2, 3, 8].into_iter().filter(|&t| run(t) != reference).collect();
    Outcome::new(
        mismatched.is_empty(),
        format!(
            "{} CSV bytes compared across 1, 1, 2, 3 and 8 threads; mismatching thread counts: {mismatched:?}",
            reference.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn performance() -> Outcome {
    let model = shapes::builtin("cube").unwrap();
    let kps = fps_select(&model, 8).unwrap();
    let cfg = SceneConfig {
        noise: NoiseConfig::new(0.05, 0.1, 0),
        ..SceneConfig::default()
    };
    let mut worst = Duration::ZERO;
    let mut pixels = 0;
    single_threaded(|| {
        for seed in 0..5 {
            let scene = synth_scene(&model, &kps, &cfg, seed).unwrap();
            let vcfg = VotingConfig {
                seed,
                ..VotingConfig::default()
            };
            let mut runs: Vec<Duration> = (0..3)
                .map(|_| {
                    let t = Instant::now();
                    let d = vote_all(&scene.mask, &scene.field, &vcfg).unwrap();
                    assert_eq!(d.len(), 9);
                    t.elapsed()
                })
                .collect();
            runs.sort();
            if runs[1] > worst {
                worst = runs[1];
                pixels = scene.mask.count();
            }
        }
    });
    Outcome::new(
        worst < Duration::from_millis(200),
        format!(
            "640x480, 9 keypoints, N=128, 1 thread: slowest of 5 scenes {:.1} ms ({pixels} object pixels)",
            worst.as_secs_f64() * 1e3
        ),
    )
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut check = |name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        println!(
            "{} {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(name.to_string());
        }
    };
    check("noiseless exactness", &noiseless_exactness);
    check("brute-force voting oracle", &oracle_equivalence);
    check("truncation", &truncation);
    check("occlusion robustness", &occlusion);
    let suite = standard_suite();
    check("ablation ordering", &|| ablation(&suite));
    check("keypoint-count trend", &|| keypoint_count(&suite));
    check("jacobian", &jacobian);
    check("fps 2-approximation", &fps_approximation);
    check("determinism", &determinism);
    check("voting performance", &performance);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
