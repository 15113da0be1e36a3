//! Analytic parameter and MAC counts, an instrumented scalar that counts
//! multiplies, and a wall-clock latency harness.
//!
//! One MAC is one scalar multiply in a matmul, convolution (padded taps
//! included), interpolation or SSM update. Activations, pooling and
//! divisions count zero.

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};
use std::time::Instant;

use crate::error::Result;
use crate::model::{forward_frame, Aggregation, ModelConfig, ParamStore};
use crate::sim::AdcFrame;
use crate::stream::{Event, StreamSession};
use crate::tensor::{Real, Upsample};

/// Parameters of one conv + scan block of `width` channels.
fn ssm_params(width: u64, d: u64, k: u64) -> u64 {
    width * k + width + 3 * d * width + 2 * d + d * width
}

/// Parameter count per group, from closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embed: u64,
    pub sample_ssm: u64,
    pub aggregate: u64,
    pub expand: u64,
    pub chirp_ssm: u64,
    pub decoder: u64,
    pub heads: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.embed + self.sample_ssm + self.aggregate + self.expand + self.chirp_ssm + self.decoder + self.heads
    }
}

pub fn param_breakdown(cfg: &ModelConfig) -> ParamBreakdown {
    let n = cfg.n_rx as u64;
    let tw = cfg.token_width() as u64;
    let k = cfg.d_conv as u64;
    let hw = (cfg.h0 * cfg.w0) as u64;
    let c = cfg.c_dec as u64;
    ParamBreakdown {
        embed: 2 * n * 2 * n + 2 * n + n * 2 * n + n,
        sample_ssm: ssm_params(n, cfg.d_state as u64, k),
        aggregate: if cfg.chirp_aggregation == Aggregation::Conv1d {
            3 * n + n
        } else {
            0
        },
        expand: 2 * n * n + 2 * n + tw * 2 * n + tw,
        chirp_ssm: ssm_params(tw, cfg.chirp_d_state as u64, k),
        decoder: hw * tw * 3 + hw + c * 9 + c + c * c * 9 + c,
        heads: u64::from(cfg.heads.segmentation) * (c + 1) + u64::from(cfg.heads.detection) * (3 * c + 3),
    }
}

pub fn count_params(cfg: &ModelConfig) -> u64 {
    param_breakdown(cfg).total()
}

/// Per-frame MACs by stage. The expansion MLP is part of the chirp stage, so
/// `embed + sample_ssm` is the whole per-sample path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacCounts {
    pub embed: u64,
    pub sample_ssm: u64,
    pub chirp_ssm: u64,
    pub decoder: u64,
}

impl MacCounts {
    pub fn sample_path(&self) -> u64 {
        self.embed + self.sample_ssm
    }

    pub fn total(&self) -> u64 {
        self.embed + self.sample_ssm + self.chirp_ssm + self.decoder
    }
}

/// Per-tick MACs of a conv + scan block over `groups` channels.
fn ssm_tick_macs(groups: u64, d: u64, k: u64) -> u64 {
    // conv taps, projection, dt·A and dt·B, three per state lane, x·ΣD
    groups * k + 3 * d * groups + 2 * d + 3 * groups * d + groups
}

pub fn count_macs(cfg: &ModelConfig) -> MacCounts {
    let n = cfg.n_rx as u64;
    let tw = cfg.token_width() as u64;
    let k = cfg.d_conv as u64;
    let c = cfg.chirps_per_frame as u64;
    let ticks = c * cfg.s_per_chirp as u64;
    let (h0, w0) = (cfg.h0 as u64, cfg.w0 as u64);
    let hw = h0 * w0;
    let cd = cfg.c_dec as u64;
    let agg = if cfg.chirp_aggregation == Aggregation::Conv1d {
        3 * n
    } else {
        0
    };
    let up = |elems: u64| {
        if cfg.upsample == Upsample::Bilinear {
            4 * elems
        } else {
            0
        }
    };
    let heads = u64::from(cfg.heads.segmentation) + 3 * u64::from(cfg.heads.detection);
    MacCounts {
        embed: ticks * (2 * n * 2 * n + 2 * n * n),
        sample_ssm: ticks * (ssm_tick_macs(n, cfg.d_state as u64, k) + agg),
        chirp_ssm: c * (2 * n * n + 2 * n * tw + ssm_tick_macs(tw, cfg.chirp_d_state as u64, k)),
        decoder: hw * tw * 3 * c
            + up(4 * hw)
            + cd * 9 * 4 * hw
            + up(16 * hw * cd)
            + cd * cd * 9 * 16 * hw
            + heads * cd * 16 * hw,
    }
}

thread_local! {
    static MULS: Cell<u64> = const { Cell::new(0) };
}

/// `f64` that counts every multiply on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct CountingF64(pub f64);

impl CountingF64 {
    pub fn reset_count() {
        MULS.with(|c| c.set(0));
    }

    pub fn count() -> u64 {
        MULS.with(Cell::get)
    }
}

impl fmt::Display for CountingF64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Mul for CountingF64 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        MULS.with(|c| c.set(c.get() + 1));
        Self(self.0 * o.0)
    }
}

impl MulAssign for CountingF64 {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

macro_rules! uncounted {
    ($tr:ident, $f:ident, $atr:ident, $af:ident, $op:tt) => {
        impl $tr for CountingF64 {
            type Output = Self;
            fn $f(self, o: Self) -> Self {
                Self(self.0 $op o.0)
            }
        }
        impl $atr for CountingF64 {
            fn $af(&mut self, o: Self) {
                self.0 = self.0 $op o.0;
            }
        }
    };
}

uncounted!(Add, add, AddAssign, add_assign, +);
uncounted!(Sub, sub, SubAssign, sub_assign, -);
uncounted!(Div, div, DivAssign, div_assign, /);

impl Neg for CountingF64 {
    type Output = Self;
    fn neg(self) -> Self {
        Self(-self.0)
    }
}

impl Sum for CountingF64 {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self(0.0), |a, b| a + b)
    }
}

impl Real for CountingF64 {
    const ZERO: Self = CountingF64(0.0);
    const ONE: Self = CountingF64(1.0);

    fn from_f64(v: f64) -> Self {
        Self(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn exp(self) -> Self {
        Self(self.0.exp())
    }
    fn ln(self) -> Self {
        Self(self.0.ln())
    }
    fn sqrt(self) -> Self {
        Self(self.0.sqrt())
    }
    fn abs(self) -> Self {
        Self(self.0.abs())
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
    fn exp_clamped(self) -> Self {
        Self(self.0.exp_clamped())
    }
    fn sigmoid(self) -> Self {
        Self(self.0.sigmoid())
    }
    fn silu(self) -> Self {
        Self(self.0.silu())
    }
    fn softplus(self) -> Self {
        Self(self.0.softplus())
    }
}

/// Multiplies performed by one batch forward of `frame`.
pub fn instrumented_macs(cfg: &ModelConfig, frame: &AdcFrame) -> Result<u64> {
    let params = ParamStore::<f64>::init(cfg).cast::<CountingF64>();
    CountingF64::reset_count();
    forward_frame(frame, &params, cfg)?;
    Ok(CountingF64::count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyMode {
    Batch,
    Streaming,
}

impl fmt::Display for LatencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            LatencyMode::Batch => "batch",
            LatencyMode::Streaming => "streaming",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mode: LatencyMode,
    pub frames: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Streaming only.
    pub tick_p99_us: Option<f64>,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub const WARMUP_FRAMES: usize = 10;

/// Times `WARMUP_FRAMES` untimed frames then `frames` timed ones, cycling
/// through `inputs`.
pub fn measure_latency<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    inputs: &[AdcFrame],
    frames: usize,
    mode: LatencyMode,
) -> Result<LatencyStats> {
    assert!(
        !inputs.is_empty() && frames > 0,
        "need at least one input and one timed frame"
    );
    let mut per_frame = Vec::with_capacity(frames);
    let mut per_tick = Vec::new();
    let mut session = StreamSession::new(params, cfg)?;
    for i in 0..WARMUP_FRAMES + frames {
        let frame = &inputs[i % inputs.len()];
        let timed = i >= WARMUP_FRAMES;
        let start = Instant::now();
        match mode {
            LatencyMode::Batch => {
                std::hint::black_box(forward_frame(frame, params, cfg)?);
            }
            LatencyMode::Streaming => {
                for t in 0..frame.ticks() {
                    let t0 = Instant::now();
                    let ev = session.ingest_interleaved(frame.tick(t))?;
                    if timed {
                        per_tick.push(t0.elapsed().as_secs_f64() * 1e6);
                    }
                    if let Event::FrameOutput { maps, .. } = ev {
                        std::hint::black_box(maps);
                    }
                }
            }
        }
        if timed {
            per_frame.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    per_frame.sort_by(f64::total_cmp);
    per_tick.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mode,
        frames,
        p50_ms: percentile(&per_frame, 50.0),
        p95_ms: percentile(&per_frame, 95.0),
        tick_p99_us: (!per_tick.is_empty()).then(|| percentile(&per_tick, 99.0)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeReport {
    pub params: ParamBreakdown,
    pub macs: MacCounts,
    pub latency: Vec<LatencyStats>,
    pub resident_state_floats: usize,
    pub peak_state_floats: usize,
}

impl ComputeReport {
    /// Counts and the memory report of a fresh session (latency left empty).
    pub fn analytic<T: Real>(params: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let session = StreamSession::new(params, cfg)?;
        let mem = session.memory_report();
        Ok(Self {
            params: param_breakdown(cfg),
            macs: count_macs(cfg),
            latency: Vec::new(),
            resident_state_floats: mem.resident_floats,
            peak_state_floats: mem.peak_floats,
        })
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let m = &self.macs;
        let mut s = format!(
            "params={}\nmacs_embed={}\nmacs_sample_ssm={}\nmacs_chirp_ssm={}\nmacs_decoder={}\nmacs_total={}\n\
             resident_state_floats={}\npeak_state_floats={}\n",
            self.params.total(),
            m.embed,
            m.sample_ssm,
            m.chirp_ssm,
            m.decoder,
            m.total(),
            self.resident_state_floats,
            self.peak_state_floats
        );
        for l in &self.latency {
            s += &format!(
                "latency_{}_p50_ms={:.4}\nlatency_{}_p95_ms={:.4}\n",
                l.mode, l.p50_ms, l.mode, l.p95_ms
            );
            if let Some(t) = l.tick_p99_us {
                s += &format!("latency_{}_tick_p99_us={t:.4}\n", l.mode);
            }
        }
        s
    }
}

impl fmt::Display for ComputeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.params;
        let m = &self.macs;
        writeln!(f, "{:<22}{:>16}", "parameters", p.total())?;
        for (name, v) in [
            ("  embed", p.embed),
            ("  sample ssm", p.sample_ssm),
            ("  aggregate", p.aggregate),
            ("  expand", p.expand),
            ("  chirp ssm", p.chirp_ssm),
            ("  decoder", p.decoder),
            ("  heads", p.heads),
        ] {
            writeln!(f, "{name:<22}{v:>16}")?;
        }
        writeln!(
            f,
            "{:<22}{:>16}  ({:.3} G)",
            "MACs / frame",
            m.total(),
            m.total() as f64 / 1e9
        )?;
        for (name, v) in [
            ("  embed", m.embed),
            ("  sample ssm", m.sample_ssm),
            ("  chirp ssm", m.chirp_ssm),
            ("  decoder", m.decoder),
        ] {
            writeln!(f, "{name:<22}{v:>16}")?;
        }
        writeln!(f, "{:<22}{:>16}", "resident state floats", self.resident_state_floats)?;
        writeln!(f, "{:<22}{:>16}", "peak state floats", self.peak_state_floats)?;
        for l in &self.latency {
            write!(
                f,
                "latency {:<14}p50 {:.3} ms  p95 {:.3} ms  ({} frames)",
                l.mode, l.p50_ms, l.p95_ms, l.frames
            )?;
            match l.tick_p99_us {
                Some(t) => writeln!(f, "  tick p99 {t:.3} us")?,
                None => writeln!(f)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_shapes;
    use crate::sim::{synthesize_frame, Dims, Scene};

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::synthetic();
        cfg.chirps_per_frame = 2;
        cfg.s_per_chirp = 4;
        cfg.n_rx = 2;
        cfg.d_state = 2;
        cfg.chirp_d_state = 2;
        cfg.h0 = 4;
        cfg.w0 = 4;
        cfg.c_dec = 2;
        cfg
    }

    #[test]
    fn closed_form_params_match_layout() {
        for mut cfg in [
            ModelConfig::radial(),
            ModelConfig::radical(),
            ModelConfig::synthetic(),
            tiny(),
        ] {
            for agg in [Aggregation::AvgPool, Aggregation::Conv1d] {
                cfg.chirp_aggregation = agg;
                let layout: usize = param_shapes(&cfg)
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>())
                    .sum();
                assert_eq!(count_params(&cfg), layout as u64);
            }
        }
    }

    #[test]
    fn analytic_macs_match_instrumented_forward() {
        let base = tiny();
        for (agg, up, det) in [
            (Aggregation::AvgPool, Upsample::Nearest, false),
            (Aggregation::Conv1d, Upsample::Bilinear, true),
            (Aggregation::FinalState, Upsample::Nearest, true),
        ] {
            let mut cfg = base.clone();
            cfg.chirp_aggregation = agg;
            cfg.upsample = up;
            cfg.heads.detection = det;
            let scene = Scene::new(vec![], 0.0, 1, Dims::new(2, 4, 2)).unwrap();
            let got = instrumented_macs(&cfg, &synthesize_frame(&scene)).unwrap();
            assert_eq!(got, count_macs(&cfg).total(), "{agg:?} {up:?} det={det}");
        }
    }

    #[test]
    fn sample_path_is_linear_in_s() {
        let a = ModelConfig::radial();
        let mut b = a.clone();
        b.s_per_chirp *= 2;
        let (ma, mb) = (count_macs(&a), count_macs(&b));
        assert_eq!(mb.sample_path(), 2 * ma.sample_path());
        assert_eq!(mb.decoder, ma.decoder);
        assert_eq!(count_params(&a), count_params(&b));
    }

    #[test]
    fn trivial_config_latency() {
        let mut cfg = tiny();
        cfg.chirps_per_frame = 1;
        cfg.s_per_chirp = 1;
        cfg.n_rx = 1;
        let params = ParamStore::<f32>::init(&cfg);
        let f = synthesize_frame(&Scene::new(vec![], 0.0, 0, Dims::new(1, 1, 1)).unwrap());
        let s = measure_latency(&params, &cfg, &[f], 5, LatencyMode::Streaming).unwrap();
        assert!(s.p50_ms > 0.0 && s.tick_p99_us.is_some());
    }

    #[test]
    fn radial_budget_and_magnitude() {
        let cfg = ModelConfig::radial();
        assert!(count_params(&cfg) < 1_000_000);
        let g = count_macs(&cfg).total() as f64 / 1e9;
        assert!((1.67 / 3.0..=1.67 * 3.0).contains(&g), "{g}");
    }
}
