//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 6, 9 and 10 share the models trained for criterion 6.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use ssmradnet::bench::{count_macs, count_params, measure_latency, LatencyMode};
use ssmradnet::dataset::Sample;
use ssmradnet::model::{checkpoint, forward_frame, Aggregation, BevMaps, ModelConfig, ParamStore};
use ssmradnet::sim::{rasterize_labels, synthesize_frame, Dims, Scene};
use ssmradnet::stream::{Policy, StreamSession};
use ssmradnet::train::eval::predict_all;
use ssmradnet::train::metrics::{accuracy, chamfer, dice, iou, targets_from_labels, DetectionAccumulator};
use ssmradnet::train::trainer::gradient_audit;
use ssmradnet::train::{EvalReport, SegLoss, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn streaming_equivalence() -> Outcome {
    let start = Instant::now();
    let mut cfg = ModelConfig::synthetic();
    cfg.chirps_per_frame = 16;
    cfg.s_per_chirp = 64;
    cfg.n_rx = 4;
    let params = ParamStore::<f64>::init(&cfg);
    let mut r = rng(101);
    let mut session = StreamSession::new(&params, &cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let frame = synthesize_frame(&Scene::random(&mut r, dims_of(&cfg), (0, 4), 10.0));
        let streamed = session.run_frame(&frame).map_err(|e| e.to_string())?;
        let batch = forward_frame(&frame, &params, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max(streamed.max_rel_diff(&batch));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && secs < 60.0,
        format!("max rel diff {worst:.2e} over 20 frames (limit 1e-9), {secs:.1} s"),
    )
}

fn gradient_audit_tiny() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config();
    let sample = &random_samples(&cfg, 1, (2, 3), 10.0, 17)[0];
    let tc = TrainConfig {
        seg_loss: SegLoss::BceJaccard,
        ..TrainConfig::default()
    };
    let params = ParamStore::<f64>::init(&cfg);
    let checks = gradient_audit(&params, &cfg, &tc, sample, usize::MAX).map_err(|e| e.to_string())?;
    let (worst_name, worst) = checks
        .iter()
        .map(|(n, c)| (n.as_str(), c.max_rel_err))
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<&str> = checks
        .iter()
        .filter(|(_, c)| !c.passes(1e-4))
        .map(|(n, _)| n.as_str())
        .collect();
    let secs = start.elapsed().as_secs_f64();
    check(
        failing.is_empty() && secs < 300.0,
        format!(
            "{} groups, worst rel err {worst:.2e} ({worst_name}), failing {failing:?}, {secs:.1} s",
            checks.len()
        ),
    )
}

fn linear_scaling() -> Outcome {
    let mut small = ModelConfig::synthetic();
    small.chirps_per_frame = 16;
    small.s_per_chirp = 256;
    small.h0 = 4;
    small.w0 = 4;
    small.c_dec = 4;
    let mut big = small.clone();
    big.s_per_chirp *= 2;
    let (ms, mb) = (count_macs(&small), count_macs(&big));
    let mac_ratio = mb.sample_path() as f64 / ms.sample_path() as f64;
    let share = ms.sample_path() as f64 / ms.total() as f64;

    let params = ParamStore::<f32>::init(&small);
    let p50 = |cfg: &ModelConfig| -> Result<f64, String> {
        let inputs: Vec<_> = (0..4).map(|i| uniform_frame(dims_of(cfg), 200 + i)).collect();
        measure_latency(&params, cfg, &inputs, 100, LatencyMode::Streaming)
            .map(|s| s.p50_ms)
            .map_err(|e| e.to_string())
    };
    let (ts, tb) = (p50(&small)?, p50(&big)?);
    let ratio = tb / ts;
    check(
        mac_ratio == 2.0 && (1.5..=2.5).contains(&ratio),
        format!(
            "sample-path MAC ratio {mac_ratio} (sample path {:.0}% of frame MACs); \
             streaming p50 {ts:.2} ms -> {tb:.2} ms, ratio {ratio:.3}",
            share * 100.0
        ),
    )
}

fn parameter_budget() -> Outcome {
    let cfg = ModelConfig::radial();
    let analytic = count_params(&cfg);
    let params = ParamStore::<f32>::init(&cfg);
    let bytes = checkpoint::encode(&cfg, &params).map_err(|e| e.to_string())?;
    let (_, restored) = checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    let stored = restored.element_count() as u64;
    check(
        analytic < 1_000_000 && stored == analytic,
        format!("count_params {analytic}, checkpoint elements {stored}"),
    )
}

fn resident_state() -> Outcome {
    let resident = |cfg: &ModelConfig| -> Result<usize, String> {
        let params = ParamStore::<f32>::init(cfg);
        let session = StreamSession::new(&params, cfg).map_err(|e| e.to_string())?;
        Ok(session.memory_report().resident_floats)
    };
    let mut s512 = ModelConfig::radial();
    s512.s_per_chirp = 512;
    let mut s1024 = s512.clone();
    s1024.s_per_chirp = 1024;
    let (a, b) = (resident(&s512)?, resident(&s1024)?);
    let mut ok = a == b;
    let mut detail = format!("S=512: {a} floats, S=1024: {b} floats");
    for (name, cfg) in [
        ("radial", ModelConfig::radial()),
        ("radical", ModelConfig::radical()),
        ("synthetic", ModelConfig::synthetic()),
    ] {
        let used = resident(&cfg)?;
        let cube = cfg.chirps_per_frame * cfg.s_per_chirp * cfg.n_rx * 2;
        ok &= used < cube;
        detail += &format!("; {name} {used} < {cube}");
    }
    check(ok, detail)
}

// ---- synthetic learning ---------------------------------------------------

struct Trained {
    label: &'static str,
    cfg: ModelConfig,
    params: ParamStore<f32>,
    report: EvalReport,
    best_epoch: usize,
    occupied_iou: f64,
    secs: f64,
}

struct LearningSet {
    train: Vec<Sample>,
    val: Vec<Sample>,
}

fn learning_set() -> LearningSet {
    let cfg = ModelConfig::synthetic();
    let mut r = rng(2024);
    let mut draw = |n: usize| -> Vec<Sample> {
        (0..n)
            .map(|_| Sample::from_scene(&Scene::random(&mut r, dims_of(&cfg), (1, 4), 10.0), cfg.output_grid()))
            .collect()
    };
    let train = draw(256);
    let val = draw(64);
    LearningSet { train, val }
}

fn learning_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 8,
        lr: 1e-4,
        weight_decay: 5e-6,
        seg_loss: SegLoss::Jaccard,
        det_loss: false,
        seed: 7,
        eval_every: 1,
    }
}

/// Mean IoU of the occupied class over frames.
fn occupied_iou(maps: &[BevMaps<f32>], samples: &[Sample]) -> f64 {
    let flip = |m: &[u8]| m.iter().map(|&v| 1 - v).collect::<Vec<u8>>();
    let total: f64 = maps
        .iter()
        .zip(samples)
        .map(|(m, s)| iou(&flip(&m.seg_mask().unwrap()), &flip(&s.labels.seg)))
        .sum();
    total / samples.len() as f64
}

fn train(label: &'static str, cfg: ModelConfig, data: &LearningSet) -> Result<Trained, String> {
    let start = Instant::now();
    let tc = learning_train_config();
    let out = Trainer::new(&cfg, &tc, ParamStore::<f32>::init(&cfg), &data.train)
        .and_then(|t| t.run(&data.val, None, |_| {}))
        .map_err(|e| format!("{label}: {e}"))?;
    let report = out.best_report.ok_or("no validation report")?;
    let maps = predict_all(&out.best, &cfg, &data.val, 1).map_err(|e| e.to_string())?;
    Ok(Trained {
        label,
        occupied_iou: occupied_iou(&maps, &data.val),
        cfg,
        params: out.best,
        report,
        best_epoch: out.best_epoch,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn describe(t: &Trained) -> String {
    format!(
        "{}: mIoU {:.4}, Dice {:.4}, occupied IoU {:.4} (best epoch {}, {:.0} s)",
        t.label, t.report.miou, t.report.dice, t.occupied_iou, t.best_epoch, t.secs
    )
}

fn synthetic_learning(base: &Trained, data: &LearningSet) -> Outcome {
    // Baseline: every cell predicted free.
    let all_free: f64 = data
        .val
        .iter()
        .map(|s| iou(&vec![1; s.labels.seg.len()], &s.labels.seg))
        .sum::<f64>()
        / data.val.len() as f64;
    check(
        base.report.dice >= 0.85 && base.report.miou >= 0.70 && base.secs <= 3600.0,
        format!("{}; all-free baseline mIoU {all_free:.4}", describe(base)),
    )
}

fn ablation_axes(base: &Trained, final_state: &Trained, no_expand: &Trained) -> Outcome {
    let pool_ok = base.report.miou >= final_state.report.miou;
    let expand_ok = base.report.miou >= no_expand.report.miou;
    check(
        pool_ok && expand_ok,
        format!(
            "avg_pool {:.4} vs final_state {:.4}; expand {:.4} vs no expand {:.4}; [{}] [{}]",
            base.report.miou,
            final_state.report.miou,
            base.report.miou,
            no_expand.report.miou,
            describe(final_state),
            describe(no_expand)
        ),
    )
}

// ---- state retention ------------------------------------------------------

struct PolicyTrace {
    miou: Vec<f64>,
    seg: Vec<Vec<f64>>,
}

fn run_policy(t: &Trained, scenes: &[Scene], policy: Policy) -> Result<PolicyTrace, String> {
    let mut session = StreamSession::new(&t.params, &t.cfg).map_err(|e| e.to_string())?;
    session.set_policy(policy).map_err(|e| e.to_string())?;
    let grid = t.cfg.output_grid();
    let mut trace = PolicyTrace {
        miou: Vec::new(),
        seg: Vec::new(),
    };
    for scene in scenes {
        let maps = session.run_frame(&synthesize_frame(scene)).map_err(|e| e.to_string())?;
        let labels = rasterize_labels(scene, grid);
        trace.miou.push(iou(&maps.seg_mask().unwrap(), &labels.seg));
        trace.seg.push(maps.seg.unwrap().iter().map(|&v| v as f64).collect());
    }
    Ok(trace)
}

/// Mean squared change of the segmentation map between consecutive frames.
fn frame_to_frame_variance(seg: &[Vec<f64>]) -> f64 {
    let diffs: Vec<f64> = seg
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / w[0].len() as f64)
        .collect();
    diffs.iter().sum::<f64>() / diffs.len() as f64
}

/// Frames after the cut until mIoU is within 5% of the policy's own steady
/// level (mean over the last half of the post-cut segment).
fn recovery_frames(miou: &[f64], cut: usize) -> usize {
    let post = &miou[cut..];
    let tail = &post[post.len() / 2..];
    let steady = tail.iter().sum::<f64>() / tail.len() as f64;
    post.iter()
        .position(|&m| (m - steady).abs() <= 0.05 * steady)
        .map_or(post.len() + 1, |k| k + 1)
}

fn state_retention(t: &Trained) -> Outcome {
    const SMOOTH: usize = 10;
    const RATE: f64 = 0.02;
    let dims = dims_of(&t.cfg);
    let mut r = rng(555);
    let mut scenes = vec![Scene::random(&mut r, dims, (2, 4), 10.0)];
    for i in 1..SMOOTH {
        let next = scenes[i - 1].advanced(RATE, 1000 + i as u64);
        scenes.push(next);
    }
    // Discontinuity: an unrelated scene, then it drifts smoothly again.
    scenes.push(Scene::random(&mut r, dims, (2, 4), 10.0));
    for i in 1..SMOOTH {
        let next = scenes[SMOOTH + i - 1].advanced(RATE, 2000 + i as u64);
        scenes.push(next);
    }
    let reset = run_policy(t, &scenes, Policy::ResetPerFrame)?;
    let retain = run_policy(t, &scenes, Policy::RetainAcrossFrames)?;
    let (var_reset, var_retain) = (
        frame_to_frame_variance(&reset.seg[..SMOOTH]),
        frame_to_frame_variance(&retain.seg[..SMOOTH]),
    );
    let (rec_reset, rec_retain) = (
        recovery_frames(&reset.miou, SMOOTH),
        recovery_frames(&retain.miou, SMOOTH),
    );
    check(
        var_retain <= var_reset && rec_reset < rec_retain,
        format!(
            "consecutive-frame variance retain {var_retain:.3e} vs reset {var_reset:.3e}; \
             recovery after cut: reset {rec_reset} frame(s), retain {rec_retain} frame(s)"
        ),
    )
}

// ---- oracles --------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut r = rng(77);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (a, b) = (random_mask(&mut r, 256), random_mask(&mut r, 256));
        mismatches += usize::from(iou(&a, &b) != oracle_iou(&a, &b, 16));
        mismatches += usize::from(dice(&a, &b) != oracle_dice(&a, &b, 16));
        mismatches += usize::from(accuracy(&a, &b) != oracle_accuracy(&a, &b, 16, 16));
        mismatches += usize::from(chamfer(&a, &b, 16, 16) != oracle_chamfer(&a, &b, 16, 16));
    }
    let mut det_fail = Vec::new();
    for f in detection_fixtures() {
        let mut acc = DetectionAccumulator::default();
        acc.add_frame(
            &f.objectness,
            &f.offsets,
            FIX_H,
            FIX_W,
            &targets_from_labels(&f.det_labels, FIX_W),
        );
        let s = acc.stats();
        if (s.precision(), s.recall(), s.f1()) != (f.precision, f.recall, f.f1) {
            det_fail.push(f.name);
        }
    }
    check(
        mismatches == 0 && det_fail.is_empty(),
        format!("200 mask pairs: {mismatches} mismatches; detection fixtures failing: {det_fail:?}"),
    )
}

fn simulator_physics() -> Outcome {
    let mut r = rng(88);
    let dims = Dims::new(16, 64, 8);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let t = random_target(&mut r);
        let scene = Scene::new(vec![t], f64::INFINITY, i, dims).map_err(|e| e.to_string())?;
        worst = worst.max(check_single_target(&synthesize_frame(&scene), &t).map_err(|e| format!("{t:?}: {e}"))?);
    }
    check(
        worst <= 1e-6,
        format!("50 targets, peak bins exact, worst phase error {worst:.2e} rad"),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, took: Duration, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{id:>2}] {name} ({:.1} s): {detail}", took.as_secs_f64());
    };
    let mut timed = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        report(id, name, start.elapsed(), outcome);
    };

    timed(1, "streaming equals batch", &streaming_equivalence);
    timed(2, "gradient audit", &gradient_audit_tiny);
    timed(3, "linear scaling in S", &linear_scaling);
    timed(4, "parameter budget", &parameter_budget);
    timed(5, "resident streaming state", &resident_state);
    timed(7, "metric oracles", &metric_oracles);
    timed(8, "simulator physics", &simulator_physics);

    let data = learning_set();
    let base_cfg = ModelConfig::synthetic();
    let mut final_cfg = base_cfg.clone();
    final_cfg.chirp_aggregation = Aggregation::FinalState;
    let mut flat_cfg = base_cfg.clone();
    flat_cfg.slow_time_expand = false;

    let base = train("avg_pool+expand", base_cfg, &data);
    timed(6, "synthetic learning", &|| synthetic_learning(base.as_ref()?, &data));
    timed(9, "ablation directions", &|| {
        let fs = train("final_state", final_cfg.clone(), &data)?;
        let ne = train("no expand", flat_cfg.clone(), &data)?;
        ablation_axes(base.as_ref()?, &fs, &ne)
    });
    timed(10, "state retention", &|| state_retention(base.as_ref()?));

    if failures == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
