//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance harness. Nothing here calls the library code it checks.
#![allow(dead_code)]

use std::collections::HashSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmradnet::dataset::Sample;
use ssmradnet::model::{Heads, ModelConfig};
use ssmradnet::sim::{AdcFrame, Dims, Scene, Target};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tiny model used for gradient audits. Its 2×2 projection (8×8 grid) is
/// below the `h0·w0 >= 16` that `validate` enforces, so only paths that skip
/// validation accept it.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::synthetic();
    cfg.chirps_per_frame = 2;
    cfg.s_per_chirp = 8;
    cfg.n_rx = 2;
    cfg.d_state = 4;
    cfg.chirp_d_state = 4;
    cfg.h0 = 2;
    cfg.w0 = 2;
    cfg.c_dec = 4;
    cfg.heads = Heads::BOTH;
    cfg
}

pub fn dims_of(cfg: &ModelConfig) -> Dims {
    Dims::new(cfg.chirps_per_frame, cfg.s_per_chirp, cfg.n_rx)
}

/// `n` random labelled frames matching `cfg`.
pub fn random_samples(cfg: &ModelConfig, n: usize, targets: (usize, usize), snr_db: f64, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Sample::from_scene(&Scene::random(&mut r, dims_of(cfg), targets, snr_db), cfg.output_grid()))
        .collect()
}

/// Frame of i.i.d. uniform values in [-1, 1).
pub fn uniform_frame(dims: Dims, seed: u64) -> AdcFrame {
    let mut r = rng(seed);
    let raw = (0..dims.complex_len() * 2)
        .map(|_| r.random_range(-1.0f32..1.0))
        .collect();
    AdcFrame::new(dims, raw).unwrap()
}

// ---- radar oracles --------------------------------------------------------

pub fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(i, v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * i) as f64 / n as f64))
                .sum()
        })
        .collect()
}

pub fn argmax_abs(x: &[Complex64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if v.norm() > x[best].norm() {
            best = i;
        }
    }
    best
}

fn sample(frame: &AdcFrame, c: usize, s: usize, rx: usize) -> Complex64 {
    let v = frame.at(c, s, rx);
    Complex64::new(v.re as f64, v.im as f64)
}

fn wrap(phase: f64) -> f64 {
    (phase + PI).rem_euclid(2.0 * PI) - PI
}

/// Checks a noise-free single-target frame: fast-time peak bin on every
/// (chirp, rx), slow-time peak bin at the range bin, and the per-receiver
/// phase step at the (range, Doppler) cell. Returns the worst phase error.
pub fn check_single_target(frame: &AdcFrame, t: &Target) -> Result<f64, String> {
    let Dims { chirps, samples, n_rx } = frame.dims;
    let mu = 0.5 * t.range_norm;
    let want_range = (mu * samples as f64).round() as usize % samples;
    let mut range_cells = vec![vec![Complex64::default(); chirps]; n_rx];
    for (rx, row) in range_cells.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let seq: Vec<Complex64> = (0..samples).map(|s| sample(frame, c, s, rx)).collect();
            let spectrum = naive_dft(&seq);
            let got = argmax_abs(&spectrum);
            if got != want_range {
                return Err(format!("fast-time peak {got} != {want_range} at c={c} rx={rx}"));
            }
            *cell = spectrum[want_range];
        }
    }
    let want_doppler = (t.doppler_norm * chirps as f64).round().rem_euclid(chirps as f64) as usize;
    let mut cells = Vec::with_capacity(n_rx);
    for (rx, seq) in range_cells.iter().enumerate() {
        let spectrum = naive_dft(seq);
        let got = argmax_abs(&spectrum);
        if got != want_doppler {
            return Err(format!("slow-time peak {got} != {want_doppler} at rx={rx}"));
        }
        cells.push(spectrum[want_doppler]);
    }
    let want_step = 2.0 * PI * 0.5 * t.azimuth.to_radians().sin();
    let mut worst = 0.0f64;
    for pair in cells.windows(2) {
        let step = (pair[1] * pair[0].conj()).arg();
        worst = worst.max(wrap(step - want_step).abs());
    }
    Ok(worst)
}

pub fn random_target(r: &mut impl Rng) -> Target {
    Target {
        range_norm: r.random_range(0.02..0.98),
        azimuth: r.random_range(-60.0..60.0),
        doppler_norm: r.random_range(-0.49..0.49),
        amplitude: r.random_range(0.2..3.0),
    }
}

// ---- metric oracles -------------------------------------------------------

fn cells(m: &[u8], w: usize) -> HashSet<(usize, usize)> {
    m.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| (i / w, i % w))
        .collect()
}

pub fn oracle_iou(a: &[u8], b: &[u8], w: usize) -> f64 {
    let (a, b) = (cells(a, w), cells(b, w));
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

pub fn oracle_dice(a: &[u8], b: &[u8], w: usize) -> f64 {
    let (a, b) = (cells(a, w), cells(b, w));
    if a.len() + b.len() == 0 {
        1.0
    } else {
        2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
    }
}

pub fn oracle_accuracy(a: &[u8], b: &[u8], h: usize, w: usize) -> f64 {
    let (sa, sb) = (cells(a, w), cells(b, w));
    let mut same = 0;
    for r in 0..h {
        for c in 0..w {
            same += usize::from(sa.contains(&(r, c)) == sb.contains(&(r, c)));
        }
    }
    same as f64 / (h * w) as f64
}

/// All-pairs Chamfer with the empty-mask conventions.
pub fn oracle_chamfer(a: &[u8], b: &[u8], h: usize, w: usize) -> f64 {
    let pa: Vec<_> = cells(a, w).into_iter().collect();
    let pb: Vec<_> = cells(b, w).into_iter().collect();
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((h * h + w * w) as f64).sqrt(),
        _ => {}
    }
    // Sum in row-major order of the source cells, as a human would.
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let mut from = from.to_vec();
        from.sort_unstable();
        let mut total = 0.0;
        for &(r, c) in &from {
            let best = to
                .iter()
                .map(|&(r2, c2)| {
                    let (dr, dc) = (r as f64 - r2 as f64, c as f64 - c2 as f64);
                    dr * dr + dc * dc
                })
                .fold(f64::INFINITY, f64::min);
            total += best.sqrt();
        }
        total / from.len() as f64
    };
    (directed(&pa, &pb) + directed(&pb, &pa)) / 2.0
}

pub fn random_mask(r: &mut impl Rng, n: usize) -> Vec<u8> {
    let density: f64 = r.random_range(0.0..1.0);
    (0..n).map(|_| u8::from(r.random_bool(density))).collect()
}

/// Hand-built detection scenes on a 16×16 grid: objectness and interleaved
/// label cells, plus the hand-counted precision, recall and F1.
pub struct DetFixture {
    pub name: &'static str,
    pub objectness: Vec<f64>,
    pub offsets: Vec<f64>,
    pub det_labels: Vec<f32>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub const FIX_H: usize = 16;
pub const FIX_W: usize = 16;

fn gt_cell(labels: &mut [f32], r: usize, c: usize, dr: f32, dc: f32) {
    let i = (r * FIX_W + c) * 3;
    labels[i..i + 3].copy_from_slice(&[1.0, dr, dc]);
}

pub fn detection_fixtures() -> Vec<DetFixture> {
    let n = FIX_H * FIX_W;
    let blank = || (vec![0.0; n], vec![0.0; 2 * n], vec![0.0f32; 3 * n]);

    // Both targets predicted at their cells with exact offsets.
    let (mut obj, mut off, mut lab) = blank();
    gt_cell(&mut lab, 3, 4, 0.1, -0.2);
    gt_cell(&mut lab, 10, 12, -0.3, 0.25);
    for &(r, c, dr, dc) in &[(3usize, 4usize, 0.1, -0.2), (10, 12, -0.3, 0.25)] {
        obj[r * FIX_W + c] = 0.9;
        off[r * FIX_W + c] = dr;
        off[n + r * FIX_W + c] = dc;
    }
    let exact = DetFixture {
        name: "exact",
        objectness: obj,
        offsets: off,
        det_labels: lab,
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };

    // Targets present, nothing above threshold.
    let (mut obj, off, mut lab) = blank();
    gt_cell(&mut lab, 5, 5, 0.0, 0.0);
    gt_cell(&mut lab, 12, 2, 0.0, 0.0);
    obj[5 * FIX_W + 5] = 0.3;
    let silent = DetFixture {
        name: "no predictions",
        objectness: obj,
        offsets: off,
        det_labels: lab,
        precision: 1.0,
        recall: 0.0,
        f1: 0.0,
    };

    // One hit (1 cell away), one missed target, one spurious peak far away.
    let (mut obj, off, mut lab) = blank();
    gt_cell(&mut lab, 4, 4, 0.0, 0.0);
    gt_cell(&mut lab, 12, 12, 0.0, 0.0);
    obj[4 * FIX_W + 5] = 0.8;
    obj[FIX_W + 14] = 0.7;
    let mixed = DetFixture {
        name: "one hit, one miss, one spurious",
        objectness: obj,
        offsets: off,
        det_labels: lab,
        precision: 0.5,
        recall: 0.5,
        f1: 0.5,
    };
    vec![exact, silent, mixed]
}
