//! Tick-by-tick ingestion: one receiver vector in, at most one event out.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::model::forward::{check_frame_dims, sample_row};
use crate::model::step::{chirp_ssm_step, decode_bev, summarize_chirp, ChirpSsmState, SampleSsmState};
use crate::model::{BevMaps, ModelConfig, ParamStore};
use crate::sim::AdcFrame;
use crate::tensor::Real;

/// What happens to the slow-time state at a frame boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Policy {
    #[default]
    ResetPerFrame,
    RetainAcrossFrames,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::ResetPerFrame => "reset",
            Policy::RetainAcrossFrames => "retain",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reset" | "reset_per_frame" => Ok(Policy::ResetPerFrame),
            "retain" | "retain_across_frames" => Ok(Policy::RetainAcrossFrames),
            _ => Err(Error::config(format!("unknown state policy '{s}' (reset | retain)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event<T> {
    None,
    ChirpToken(Vec<T>),
    /// Emitted on the last tick of a frame together with its chirp token.
    FrameOutput {
        token: Vec<T>,
        maps: BevMaps<T>,
    },
}

/// Live model-state sizes in scalars, parameters excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    /// Recurrent state plus the preallocated `U`.
    pub resident_floats: usize,
    /// High-water mark including per-tick scratch and decoder activations.
    pub peak_floats: usize,
}

/// 1-based `(c, s)` of frame-local tick `t` (also 1-based).
pub fn chirp_sample(t: u64, s_per_chirp: u64) -> (u64, u64) {
    let c = t.div_ceil(s_per_chirp);
    (c, t - (c - 1) * s_per_chirp)
}

/// A streaming inference session over borrowed parameters.
#[derive(Debug, Clone)]
pub struct StreamSession<'p, T> {
    params: &'p ParamStore<T>,
    config: ModelConfig,
    tick: u64,
    sample: SampleSsmState<T>,
    chirp: ChirpSsmState<T>,
    policy: Policy,
    emitted: u64,
    row: Vec<T>,
    decoder_peak: usize,
}

impl<'p, T: Real> StreamSession<'p, T> {
    pub fn new(params: &'p ParamStore<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        params.check_layout(config)?;
        Ok(Self {
            params,
            config: config.clone(),
            tick: 0,
            sample: SampleSsmState::new(params, config),
            chirp: ChirpSsmState::new(params, config),
            policy: Policy::ResetPerFrame,
            emitted: 0,
            row: vec![T::ZERO; 2 * config.n_rx],
            decoder_peak: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    /// Ticks ingested since the session opened.
    pub fn ticks(&self) -> u64 {
        self.tick
    }

    pub fn frames_emitted(&self) -> u64 {
        self.emitted
    }

    fn frame_ticks(&self) -> u64 {
        self.config.ticks_per_frame() as u64
    }

    /// 1-based `(c, s)` of the most recent tick, or `None` before the first.
    pub fn position(&self) -> Option<(u64, u64)> {
        (self.tick > 0).then(|| {
            let t = (self.tick - 1) % self.frame_ticks() + 1;
            chirp_sample(t, self.config.s_per_chirp as u64)
        })
    }

    pub fn at_frame_boundary(&self) -> bool {
        self.tick.is_multiple_of(self.frame_ticks())
    }

    pub fn set_policy(&mut self, policy: Policy) -> Result<()> {
        if !self.at_frame_boundary() {
            return Err(Error::contract("state policy can only change between frames"));
        }
        // The next frame must start from zero slow-time state under reset.
        if policy == Policy::ResetPerFrame {
            self.chirp.reset();
        }
        self.policy = policy;
        Ok(())
    }

    /// Zeroes both recurrent states. Only valid between frames.
    pub fn reset(&mut self) -> Result<()> {
        if !self.at_frame_boundary() {
            return Err(Error::contract("reset requested mid-frame"));
        }
        self.sample.reset();
        self.chirp.reset();
        Ok(())
    }

    pub fn sample_state(&self) -> &SampleSsmState<T> {
        &self.sample
    }

    pub fn chirp_state(&self) -> &ChirpSsmState<T> {
        &self.chirp
    }

    pub fn ingest(&mut self, x: &[Complex<f32>]) -> Result<Event<T>> {
        if x.len() != self.config.n_rx {
            return Err(Error::contract(format!(
                "expected {} receiver samples, got {}",
                self.config.n_rx,
                x.len()
            )));
        }
        let n = x.len();
        for (i, v) in x.iter().enumerate() {
            self.row[i] = T::from_f64(v.re as f64);
            self.row[n + i] = T::from_f64(v.im as f64);
        }
        self.advance()
    }

    /// [`ingest`](Self::ingest) for an interleaved `(re, im)` vector.
    pub fn ingest_interleaved(&mut self, x: &[f32]) -> Result<Event<T>> {
        if x.len() != 2 * self.config.n_rx {
            return Err(Error::contract(format!(
                "expected {} interleaved reals, got {}",
                2 * self.config.n_rx,
                x.len()
            )));
        }
        sample_row(x, &mut self.row);
        self.advance()
    }

    fn advance(&mut self) -> Result<Event<T>> {
        self.sample.step(self.params, &self.row)?;
        self.tick += 1;
        if self.sample.steps() < self.config.s_per_chirp {
            return Ok(Event::None);
        }
        let token = summarize_chirp(self.params, &self.sample)?;
        self.sample.reset();
        chirp_ssm_step(self.params, &token, &mut self.chirp)?;
        if self.chirp.rows() < self.config.chirps_per_frame {
            return Ok(Event::ChirpToken(token));
        }
        let (maps, peak) = decode_bev(self.params, &self.config, self.chirp.u())?;
        self.decoder_peak = self.decoder_peak.max(peak);
        self.emitted += 1;
        match self.policy {
            Policy::ResetPerFrame => self.chirp.reset(),
            Policy::RetainAcrossFrames => self.chirp.flush(),
        }
        Ok(Event::FrameOutput { token, maps })
    }

    /// Replays a whole frame tick by tick and returns its maps.
    pub fn run_frame(&mut self, frame: &AdcFrame) -> Result<BevMaps<T>> {
        check_frame_dims(frame, &self.config)?;
        if !self.at_frame_boundary() {
            return Err(Error::contract("run_frame called mid-frame"));
        }
        for t in 0..frame.ticks() {
            if let Event::FrameOutput { maps, .. } = self.ingest_interleaved(frame.tick(t))? {
                return Ok(maps);
            }
        }
        unreachable!("a full frame always ends in a frame output")
    }

    pub fn memory_report(&self) -> MemoryReport {
        let resident = self.sample.state_floats() + self.chirp.state_floats();
        let scratch = self.row.len() + self.sample.scratch_floats() + self.chirp.scratch_floats();
        let token = self.config.token_width();
        MemoryReport {
            resident_floats: resident,
            peak_floats: resident + (scratch + token).max(self.decoder_peak),
        }
    }
}
