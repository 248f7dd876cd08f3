//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `D2S_ACCEPTANCE_ONLY=4,5` restricts the run to some criteria and
//! `D2S_ACCEPTANCE_CACHE=<file>` reuses the desk model between runs.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use d2s::diffcore::{gradient_check, DiffError, Tape, Tensor, Var};
use d2s::frame::{Camera, Frame, FrameLabels};
use d2s::geometry::{pose_error, project, CameraPose, Intrinsics};
use d2s::io::{decode_checkpoint, decode_frame, encode_checkpoint, encode_frame, read_checkpoint, write_checkpoint, write_frame, Checkpoint};
use d2s::net::{reliability, DescriptorSet, ModelParams, NetConfig};
use d2s::pose::{p3p, ransac_pnp, refine_lm, Correspondence, LmConfig, RansacConfig};
use d2s::pseudo_label::{pseudo_label, MIN_VALID};
use d2s::synth::{evaluate, EvalConfig, EvalReport, Preset};
use d2s::training::{total_loss, total_loss_on_tape, train, update_with_pseudo, LossWeights, Normalization, TrainConfig};
use d2s::Model;

/// Stage iterations of every arm of the depth ablation.
const ABLATION_STAGE1: usize = 8_000;
const ABLATION_STAGE2: usize = 2_000;
/// Norm of the descriptor offset on shifted test and unlabeled frames.
const SHIFT: f64 = 1.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let only: Option<HashSet<u32>> = std::env::var("D2S_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|set| set.contains(&n));
    let mut desk: Option<DeskRun> = None;
    let mut failed = 0;
    let names = [
        "gradient correctness",
        "reliability mapping",
        "geometry and solver exactness",
        "desk-scale training",
        "reliability learning",
        "graph-depth ablation",
        "self-supervised update",
        "invariant suites",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i as u32 + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(desk.get_or_insert_with(DeskRun::new)),
            5 => criterion_5(desk.get_or_insert_with(DeskRun::new)),
            6 => criterion_6(),
            7 => criterion_7(desk.get_or_insert_with(DeskRun::new)),
            _ => criterion_8(),
        };
        let secs = start.elapsed().as_secs_f64();
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n} ({name}): {} [{:.1}s] {}",
            if result.pass { "PASS" } else { "FAIL" },
            secs,
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- criterion 1

fn tensor(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Values bounded away from zero, with random signs.
fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError>>;

/// Sum of `out * w` with a fixed random `w`, so every output entry matters.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, DiffError> {
    let (r, c) = tape.shape(out);
    let w = tape.constant_tensor(&tensor(r, c, seed, -1.0, 1.0));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let a = || tensor(4, 3, 1, -1.0, 1.0);
    let b = || tensor(3, 5, 2, -1.0, 1.0);
    let same = || tensor(4, 3, 3, -1.0, 1.0);
    let row = || tensor(1, 3, 4, -1.0, 1.0);
    vec![
        ("matmul", vec![a(), b()], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; contract(t, y, 10) })),
        ("matmul_nt", vec![a(), tensor(5, 3, 5, -1.0, 1.0)], Box::new(|t, v| { let y = t.matmul_nt(v[0], v[1])?; contract(t, y, 11) })),
        ("matmul_wide", vec![a(), b()], Box::new(|t, v| { let y = t.matmul_wide(v[0], v[1])?; contract(t, y, 12) })),
        ("affine", vec![a(), tensor(3, 5, 6, -1.0, 1.0), tensor(1, 5, 7, -1.0, 1.0)], Box::new(|t, v| { let y = t.affine(v[0], v[1], v[2])?; contract(t, y, 13) })),
        ("add", vec![a(), same()], Box::new(|t, v| { let y = t.add(v[0], v[1])?; contract(t, y, 14) })),
        ("add_row_broadcast", vec![a(), row()], Box::new(|t, v| { let y = t.add(v[0], v[1])?; contract(t, y, 15) })),
        ("sub", vec![a(), same()], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; contract(t, y, 16) })),
        ("mul", vec![a(), same()], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; contract(t, y, 17) })),
        ("div", vec![a(), away_from_zero(4, 3, 8)], Box::new(|t, v| { let y = t.div(v[0], v[1])?; contract(t, y, 18) })),
        ("scale", vec![a()], Box::new(|t, v| { let y = t.scale(v[0], -1.7); contract(t, y, 19) })),
        ("add_scalar", vec![a()], Box::new(|t, v| { let y = t.add_scalar(v[0], 0.3); let y = t.square(y); contract(t, y, 20) })),
        ("concat_cols", vec![a(), tensor(4, 2, 9, -1.0, 1.0)], Box::new(|t, v| { let y = t.concat_cols(&[v[0], v[1]])?; contract(t, y, 21) })),
        ("concat_rows", vec![a(), tensor(2, 3, 9, -1.0, 1.0)], Box::new(|t, v| { let y = t.concat_rows(&[v[0], v[1]])?; contract(t, y, 22) })),
        ("slice_cols", vec![a()], Box::new(|t, v| { let y = t.slice_cols(v[0], 1, 2)?; contract(t, y, 23) })),
        ("slice_rows", vec![a()], Box::new(|t, v| { let y = t.slice_rows(v[0], 1, 2)?; contract(t, y, 24) })),
        ("relu", vec![away_from_zero(4, 3, 25)], Box::new(|t, v| { let y = t.relu(v[0]); contract(t, y, 26) })),
        ("softmax_rows", vec![a()], Box::new(|t, v| { let y = t.softmax_rows(v[0]); contract(t, y, 27) })),
        ("square", vec![a()], Box::new(|t, v| { let y = t.square(v[0]); contract(t, y, 28) })),
        ("abs_smooth", vec![away_from_zero(4, 3, 29)], Box::new(|t, v| { let y = t.abs_smooth(v[0]); contract(t, y, 30) })),
        ("recip", vec![away_from_zero(4, 3, 31)], Box::new(|t, v| { let y = t.recip(v[0]); contract(t, y, 32) })),
        ("sum", vec![a()], Box::new(|t, v| { let y = t.square(v[0]); Ok(t.sum(y)) })),
        ("mean", vec![a()], Box::new(|t, v| { let y = t.square(v[0]); Ok(t.mean(y)) })),
        (
            "attention",
            vec![tensor(7, 6, 33, -1.0, 1.0), tensor(7, 6, 34, -1.0, 1.0), tensor(7, 6, 35, -1.0, 1.0)],
            Box::new(|t, v| { let y = t.attention(v[0], v[1], v[2], &[3, 4], 2, 0.4)?; contract(t, y, 36) }),
        ),
    ]
}

/// Labeled frame whose keypoints are exact projections of its labels.
fn mini_frame(k: usize, d: usize, seed: u64, intrinsics: Intrinsics<f64>) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let pose = CameraPose::look_at(Vector3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.5), Vector3::zeros(), Vector3::z());
    let mut coords = Vec::new();
    let mut kps = Vec::new();
    for _ in 0..k {
        let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let px = project(&pose, &intrinsics, &w).unwrap();
        coords.push([w.x as f32, w.y as f32, w.z as f32]);
        // offset keeps the reprojection residuals away from zero
        kps.push([px.x as f32 + 0.3, px.y as f32 - 0.2]);
    }
    let desc = (0..k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Frame {
        descriptors: DescriptorSet::new(d, desc, kps).unwrap(),
        labels: Some(FrameLabels {
            coords,
            reliable: (0..k).map(|i| i % 3 != 2).collect(),
        }),
        camera: Some(Camera { pose, intrinsics }),
    }
}

fn mini_net() -> NetConfig {
    NetConfig {
        descriptor_dim: 16,
        layers: 2,
        heads: 4,
        head_hidden: vec![12, 10],
        beta: 100.0,
    }
}

fn criterion_1() -> Outcome {
    let mut worst = (0.0f64, "");
    for (name, params, build) in primitive_cases() {
        let r = gradient_check(|t, v| build(t, v), &params, 1e-6, 1000, 0).unwrap();
        if r.max_relative_error.is_nan() || r.max_relative_error > worst.0 {
            worst = (r.max_relative_error, name);
        }
    }
    let primitives_ok = worst.0 < 1e-6;

    let params = ModelParams::<f64>::init(mini_net(), 13).unwrap();
    // small focal length keeps the reprojection term on the scale of the others
    let k = Intrinsics::new(2.0, 2.0, 0.1, -0.1).unwrap();
    let frames: Vec<Frame> = (0..2).map(|s| mini_frame(8, 16, 60 + s, k)).collect();
    let batch: Vec<&Frame> = frames.iter().collect();
    let weights = LossWeights::new(1.0, 1.0, 1.0);
    let r = gradient_check(
        |tape: &mut Tape<f64>, vars: &[Var]| total_loss_on_tape(tape, &params, vars, &batch, &weights, Normalization::Frames),
        params.tensors(),
        1e-6,
        1500,
        3,
    )
    .unwrap();
    let loss_ok = r.max_relative_error < 1e-6;
    outcome(
        primitives_ok && loss_ok,
        format!(
            "primitives max rel err {:.2e} (worst {}), total loss max rel err {:.2e} over {} coordinates",
            worst.0, worst.1, r.max_relative_error, r.checked
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut errors = Vec::new();
    for beta in [1.0f64, 2.0, 4.0, 10.0, 100.0] {
        if reliability(0.0, beta) != 1.0 {
            errors.push(format!("z(0) != 1 at beta {beta}"));
        }
        for p in [1.0 / beta, -1.0 / beta] {
            if reliability(p, beta) != 0.5 {
                errors.push(format!("z({p}) = {} at beta {beta}", reliability(p, beta)));
            }
        }
        let mut prev = f64::INFINITY;
        for i in 0..2000 {
            let p = i as f64 * 1e-3 * 1.01f64.powi(i / 10);
            let (zp, zn) = (reliability(p, beta), reliability(-p, beta));
            if zp != zn || !(zp > 0.0 && zp <= 1.0) || (i > 0 && zp >= prev) {
                errors.push(format!("monotonicity or range broken at p {p}"));
                break;
            }
            prev = zp;
        }
        // beta * p stays finite, so the result must stay positive
        for p in [1e30, -1e30, 1e300, -1e300] {
            let z = reliability(p, beta);
            if !(z > 0.0 && z <= 1.0) {
                errors.push(format!("z({p}) = {z} outside (0, 1]"));
            }
        }
    }
    if reliability(0.01f32, 100.0f32) != 0.5 || reliability(0.0f32, 100.0f32) != 1.0 {
        errors.push("single precision endpoints".into());
    }
    outcome(
        errors.is_empty(),
        if errors.is_empty() {
            "z(0) = 1, z(+-1/beta) = 0.5, strictly decreasing in |p|, range (0, 1] for 5 betas".into()
        } else {
            errors.join("; ")
        },
    )
}

// ---------------------------------------------------------------- criterion 3

fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose<f64> {
    let dir: Vector3<f64> = box_point(rng).normalize();
    // orbit radii of the synthetic desk scene
    let center = dir * rng.random_range(2.5..4.0);
    let target = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let up = if dir.z.abs() > 0.9 { Vector3::x() } else { Vector3::z() };
    CameraPose::look_at(center, target, up)
}

fn box_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

fn criterion_3() -> Outcome {
    let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut exact_worst_t, mut exact_worst_r) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let pose = random_pose(&mut rng);
        let corr: Vec<Correspondence<f64>> = (0..20)
            .map(|_| {
                let w = box_point(&mut rng);
                Correspondence::new(project(&pose, &k, &w).unwrap(), w)
            })
            .collect();
        let candidates = p3p(&[corr[0], corr[1], corr[2]], &k).unwrap_or_default();
        let best = candidates.iter().min_by(|a, b| {
            let ea = d2s::pose::reprojection_cost(a, &corr, &k);
            let eb = d2s::pose::reprojection_cost(b, &corr, &k);
            ea.total_cmp(&eb)
        });
        let (t, r) = match best {
            Some(p) => {
                let refined = refine_lm(p, &corr, &k, &LmConfig::default());
                let e = pose_error(&refined, &pose);
                (e.translation_error, e.rotation_error)
            }
            None => (f64::INFINITY, f64::INFINITY),
        };
        exact_worst_t = exact_worst_t.max(t);
        exact_worst_r = exact_worst_r.max(r);
    }
    let exact_ok = exact_worst_t < 1e-6 && exact_worst_r < 1e-6;

    let diameter = 2.0 * 3.0f64.sqrt();
    let noise = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let mut successes = 0;
    for trial in 0..100u64 {
        let pose = random_pose(&mut rng);
        let mut corr = Vec::new();
        while corr.len() < 50 {
            let w = box_point(&mut rng);
            let px = project(&pose, &k, &w).unwrap();
            let px = px + Vector2::new(rng.sample(noise), rng.sample(noise));
            corr.push(Correspondence::new(px, w));
        }
        for _ in 0..50 {
            let px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            corr.push(Correspondence::new(px, box_point(&mut rng)));
        }
        let config = RansacConfig {
            seed: trial,
            ..RansacConfig::default()
        };
        if let Ok(est) = ransac_pnp(&corr, &k, &config) {
            if pose_error(&est.pose, &pose).translation_error < 0.01 * diameter {
                successes += 1;
            }
        }
    }
    outcome(
        exact_ok && successes >= 95,
        format!(
            "noiseless worst error {exact_worst_t:.1e} units / {exact_worst_r:.1e} deg over 100 poses; \
             {successes}/100 RANSAC trials within 1% diameter at 50% outliers, 1 px noise"
        ),
    )
}

// ------------------------------------------------------------- criteria 4, 5, 7

struct DeskRun {
    preset: Preset,
    diameter: f64,
    test: Vec<Frame>,
    model: Model,
    train_secs: f64,
}

impl DeskRun {
    fn new() -> Self {
        let preset = Preset::desk();
        let (scene, data) = preset.build().unwrap();
        let cache = std::env::var("D2S_ACCEPTANCE_CACHE").ok().map(PathBuf::from);
        let start = Instant::now();
        let model = match cache.as_deref().filter(|p| p.is_file()) {
            Some(path) => read_checkpoint(path).unwrap().params_for(&preset.net).unwrap().clone(),
            None => {
                let init = Model::init(preset.net.clone(), preset.train.seed).unwrap();
                let model = train(init, &data.train, &preset.train).unwrap();
                if let Some(path) = &cache {
                    write_checkpoint(path, &Checkpoint::new(model.clone())).unwrap();
                }
                model
            }
        };
        Self {
            diameter: scene.diameter,
            test: data.test,
            model,
            train_secs: start.elapsed().as_secs_f64(),
            preset,
        }
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig::for_diameter(self.diameter)
    }
}

fn localize_with_cli(run: &DeskRun, frame: &Frame) -> Result<(f64, f64), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("desk.d2sm");
    let frame_path = dir.path().join("query.d2sf");
    write_checkpoint(&ckpt, &Checkpoint::new(run.model.clone())).map_err(|e| e.to_string())?;
    write_frame(&frame_path, frame).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_d2s"))
        .args(["localize", path_str(&ckpt), path_str(&frame_path)])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let fields: Vec<f64> = String::from_utf8_lossy(&out.stdout)
        .split_whitespace()
        .map(|x| x.parse().map_err(|_| format!("bad number {x}")))
        .collect::<Result<_, _>>()?;
    if fields.len() != 13 {
        return Err(format!("expected 13 fields, got {}", fields.len()));
    }
    let pose = CameraPose::from_array(&fields[..12].try_into().unwrap()).map_err(|e| e.to_string())?;
    let e = pose_error(&pose, &frame.camera.unwrap().pose);
    Ok((e.translation_error, e.rotation_error))
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn criterion_4(run: &mut DeskRun) -> Outcome {
    let report = evaluate(&run.model, &run.test, &run.eval_config()).unwrap();
    let d = run.diameter;
    let numbers_ok = report.median_translation < 0.02 * d && report.median_rotation < 2.0 && report.recall >= 90.0;
    let cli = localize_with_cli(run, &run.test[0]);
    let cli_ok = matches!(cli, Ok((t, r)) if t < 0.05 * d && r < 5.0);
    outcome(
        numbers_ok && cli_ok,
        format!(
            "median t {:.4} ({:.2}% of diameter {:.3}), median r {:.3} deg, recall {:.1}%, training {:.0}s, \
             {} iterations; cli localize of test frame 0: {}",
            report.median_translation,
            100.0 * report.median_translation / d,
            d,
            report.median_rotation,
            report.recall,
            run.train_secs,
            run.preset.train.stage1_iters + run.preset.train.stage2_iters,
            match cli {
                Ok((t, r)) => format!("t {t:.4}, r {r:.3} deg"),
                Err(e) => format!("failed: {e}"),
            }
        ),
    )
}

fn criterion_5(run: &mut DeskRun) -> Outcome {
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut z_rel, mut n_rel, mut z_unrel, mut n_unrel) = (0.0, 0usize, 0.0, 0usize);
    for f in &run.test {
        let pred = run.model.forward(&f.descriptors).unwrap();
        for (z, &truth) in pred.reliability.iter().zip(&f.labels.as_ref().unwrap().reliable) {
            correct += ((*z >= 0.5) == truth) as usize;
            total += 1;
            if truth {
                z_rel += *z as f64;
                n_rel += 1;
            } else {
                z_unrel += *z as f64;
                n_unrel += 1;
            }
        }
    }
    let accuracy = 100.0 * correct as f64 / total as f64;
    let gap = z_rel / n_rel as f64 - z_unrel / n_unrel as f64;
    let filtered = run.eval_config();
    let unfiltered = EvalConfig {
        filter: false,
        ..filtered
    };
    // warm both paths once, then time
    let _ = evaluate(&run.model, &run.test[..2], &filtered);
    let a: EvalReport = evaluate(&run.model, &run.test, &filtered).unwrap();
    let b: EvalReport = evaluate(&run.model, &run.test, &unfiltered).unwrap();
    let (ta, tb) = (a.mean_solver_ms(), b.mean_solver_ms());
    outcome(
        accuracy >= 90.0 && ta < tb && gap >= 0.4,
        format!(
            "reliability accuracy {accuracy:.1}% over {total} descriptors, mean z gap {gap:.3}; \
             mean RANSAC time {ta:.2} ms filtered vs {tb:.2} ms unfiltered (recall {:.1}% vs {:.1}%)",
            a.recall, b.recall
        ),
    )
}

fn criterion_7(run: &mut DeskRun) -> Outcome {
    let preset = Preset::shifted(SHIFT);
    let (_, shifted) = preset.build().unwrap();
    let cfg = run.eval_config();
    let before_shifted = evaluate(&run.model, &shifted.test, &cfg).unwrap();
    let before_plain = evaluate(&run.model, &run.test, &cfg).unwrap();

    let (_, plain) = run.preset.build().unwrap();
    let report = pseudo_label(&plain.train, &shifted.unlabeled);
    let admitted = report.admitted.len();
    let gate_ok = report.admitted.iter().all(|(_, p)| p.s >= MIN_VALID);
    let pseudo = report.into_frames();
    if pseudo.is_empty() {
        return outcome(false, "no unlabeled frame passed the pseudo-label gate".into());
    }
    let updated = update_with_pseudo(run.model.clone(), &plain.train, &pseudo, &preset.train).unwrap();
    let after_shifted = evaluate(&updated, &shifted.test, &cfg).unwrap();
    let after_plain = evaluate(&updated, &run.test, &cfg).unwrap();

    let gain = 1.0 - after_shifted.median_translation / before_shifted.median_translation;
    let drift = after_plain.median_translation / before_plain.median_translation - 1.0;
    outcome(
        gate_ok && gain >= 0.25 && drift <= 0.10,
        format!(
            "shift {SHIFT}: {admitted}/{} unlabeled frames admitted; shifted median t {:.4} -> {:.4} ({:.1}% lower, \
             recall {:.1}% -> {:.1}%); unshifted median t {:.4} -> {:.4} ({:+.1}%)",
            shifted.unlabeled.len(),
            before_shifted.median_translation,
            after_shifted.median_translation,
            100.0 * gain,
            before_shifted.recall,
            after_shifted.recall,
            before_plain.median_translation,
            after_plain.median_translation,
            100.0 * drift
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let mut preset = Preset::hard();
    preset.train.stage1_iters = ABLATION_STAGE1;
    preset.train.stage2_iters = ABLATION_STAGE2;
    let (scene, data) = preset.build().unwrap();
    let cfg = EvalConfig::for_diameter(scene.diameter);
    let mut medians = Vec::new();
    for layers in [2usize, 1, 0] {
        let net = preset.net.clone().with_layers(layers);
        let init = Model::init(net, preset.train.seed).unwrap();
        let model = train(init, &data.train, &preset.train).unwrap();
        let report = evaluate(&model, &data.test, &cfg).unwrap();
        medians.push((layers, report.median_translation, report.recall));
    }
    let (full, reduced, none) = (medians[0].1, medians[1].1, medians[2].1);
    outcome(
        full <= reduced && reduced <= none && full <= 0.8 * none,
        format!(
            "median t (recall) by depth: {}; full is {:.1}% better than none; {} + {} iterations per arm",
            medians
                .iter()
                .map(|(l, t, r)| format!("L={l} {t:.4} ({r:.0}%)"))
                .collect::<Vec<_>>()
                .join(", "),
            100.0 * (1.0 - full / none),
            ABLATION_STAGE1,
            ABLATION_STAGE2
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut failures: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    let mut preset = Preset::desk();
    preset.trajectory.train = 8;
    preset.trajectory.test = 4;
    preset.trajectory.unlabeled = 4;
    let (scene, data) = preset.build().unwrap();
    let (_, again) = preset.build().unwrap();
    check(data.train == again.train && data.test == again.test && data.unlabeled == again.unlabeled, "synth determinism");

    // permutation equivariance, bit for bit
    let model = Model::init(preset.net.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for f in &data.test {
        let mut order: Vec<usize> = (0..f.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let base = model.forward(&f.descriptors).unwrap();
        let perm = model.forward(&f.descriptors.permuted(&order)).unwrap();
        let same = order.iter().enumerate().all(|(i, &j)| {
            perm.coords[i].map(f32::to_bits) == base.coords[j].map(f32::to_bits)
                && perm.raw_p[i].to_bits() == base.raw_p[j].to_bits()
        });
        check(same, "permutation equivariance");
    }

    // file round trips, bit for bit
    for f in data.train.iter().chain(&data.unlabeled) {
        let bytes = encode_frame(f);
        let back = decode_frame(&bytes).unwrap();
        check(encode_frame(&back) == bytes && back == *f, "frame round trip");
    }
    let ckpt = Checkpoint::new(model.clone());
    let bytes = encode_checkpoint(&ckpt);
    let back = decode_checkpoint(&bytes).unwrap();
    check(encode_checkpoint(&back) == bytes && back == ckpt, "checkpoint round trip");

    // training and evaluation determinism
    let short = TrainConfig {
        stage1_iters: 30,
        stage2_iters: 10,
        ..preset.train.clone()
    };
    let a = train(model.clone(), &data.train, &short).unwrap();
    let b = train(model.clone(), &data.train, &short).unwrap();
    check(encode_checkpoint(&Checkpoint::new(a.clone())) == encode_checkpoint(&Checkpoint::new(b)), "train determinism");
    let cfg = EvalConfig::for_diameter(scene.diameter);
    let strip = |r: EvalReport| r.records.iter().map(|x| (x.translation_error.to_bits(), x.rotation_error.to_bits(), x.inliers)).collect::<Vec<_>>();
    check(
        strip(evaluate(&a, &data.test, &cfg).unwrap()) == strip(evaluate(&a, &data.test, &cfg).unwrap()),
        "eval determinism",
    );

    // pseudo-labels are copies of training coordinates, and training frames are untouched
    let before = data.train.clone();
    let report = pseudo_label(&data.train, &data.unlabeled);
    let known: HashSet<[u32; 3]> = data
        .train
        .iter()
        .flat_map(|f| {
            let l = f.labels.as_ref().unwrap();
            l.coords.iter().zip(&l.reliable).filter(|(_, &z)| z).map(|(c, _)| c.map(f32::to_bits)).collect::<Vec<_>>()
        })
        .collect();
    let copies = report
        .admitted
        .iter()
        .all(|(_, p)| p.coords.iter().zip(&p.valid).filter(|(_, &v)| v).all(|(c, _)| known.contains(&c.map(f32::to_bits))));
    check(!report.admitted.is_empty() && copies, "pseudo-label set inclusion");
    check(data.train == before, "training set unchanged by pseudo-labeling");

    // rows with z = 0 never influence the loss
    let mini = ModelParams::<f64>::init(mini_net(), 21).unwrap();
    let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
    let frame = mini_frame(9, 16, 4, k);
    let mut moved = frame.clone();
    let labels = moved.labels.as_mut().unwrap();
    for (c, &z) in labels.coords.iter_mut().zip(&labels.reliable.clone()) {
        if !z {
            *c = [c[0] + 40.0, c[1] - 7.0, c[2] * 3.0];
        }
    }
    for w in [LossWeights::STAGE1, LossWeights::STAGE2, LossWeights::UPDATE] {
        for norm in [Normalization::Frames, Normalization::ReliableCount] {
            let x = total_loss(&mini, &[&frame], &w, norm).unwrap();
            let y = total_loss(&mini, &[&moved], &w, norm).unwrap();
            let grads = |f: &Frame| {
                let mut tape = Tape::new();
                let vars = mini.register(&mut tape, true);
                let l = total_loss_on_tape(&mut tape, &mini, &vars, &[f], &w, norm).unwrap();
                tape.backward(l).unwrap();
                vars.iter().flat_map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default()).map(f64::to_bits).collect::<Vec<_>>()
            };
            check(x.to_bits() == y.to_bits() && grads(&frame) == grads(&moved), "loss masking at z = 0");
        }
    }

    failures.dedup();
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "permutation equivariance, file round trips, seeded determinism, pseudo-label copies, z = 0 masking all hold".into()
        } else {
            format!("broken: {}", failures.join(", "))
        },
    )
}
