//! Per-tick evaluation of the network. Every function here calls the same
//! kernels as the tape ops in [`super::forward`], in the same order, so a
//! tick-by-tick run reproduces the batch forward exactly.

use super::config::{Aggregation, ModelConfig};
use super::forward::BevMaps;
use super::params::ParamStore;
use super::ssm::{ssm_tick, ScanConsts, TickScratch};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Real};

/// Two-layer MLP: parameter indices plus the hidden activation.
#[derive(Debug, Clone)]
struct Mlp<T> {
    ids: [usize; 4],
    hidden: Vec<T>,
}

impl<T: Real> Mlp<T> {
    fn new(params: &ParamStore<T>, prefix: &str) -> Self {
        let id = |n: &str| params.index_of(&format!("{prefix}.{n}"));
        let ids = [id("w1"), id("b1"), id("w2"), id("b2")];
        Self {
            ids,
            hidden: vec![T::ZERO; params.at(ids[1]).len()],
        }
    }

    fn run(&mut self, params: &ParamStore<T>, x: &[T], out: &mut [T]) {
        let [w1, b1, w2, b2] = self.ids.map(|i| params.at(i));
        let hid = b1.len();
        kernels::linear(x, 1, x.len(), w1, hid, Some(b1), &mut self.hidden);
        self.hidden.iter_mut().for_each(|v| *v = v.silu());
        kernels::linear(&self.hidden, 1, hid, w2, out.len(), Some(b2), out);
    }
}

/// Embeds one `[Re | Im]` receiver row into `n_rx` channels.
pub fn embed_sample<T: Real>(params: &ParamStore<T>, row: &[T], out: &mut [T]) {
    Mlp::new(params, "embed").run(params, row, out);
}

/// The last `width-1` tokens of a causal convolution, newest first.
#[derive(Debug, Clone)]
pub struct ConvFifo<T> {
    history: Vec<Vec<T>>,
}

impl<T: Real> ConvFifo<T> {
    pub fn new(width: usize, channels: usize) -> Self {
        Self {
            history: vec![vec![T::ZERO; channels]; width.saturating_sub(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn floats(&self) -> usize {
        self.history.iter().map(Vec::len).sum()
    }

    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(|h| h.fill(T::ZERO));
    }

    fn push(&mut self, z: &[T]) {
        if !self.history.is_empty() {
            self.history.rotate_right(1);
            self.history[0].copy_from_slice(z);
        }
    }
}

/// One tick of a per-channel causal convolution; advances the FIFO.
pub fn causal_conv_step<T: Real>(z: &[T], fifo: &mut ConvFifo<T>, w: &[T], b: &[T], out: &mut [T]) {
    kernels::causal_conv_tick(z, &fifo.history, w, fifo.history.len() + 1, b, out);
    fifo.push(z);
}

/// Recurrent state of one conv + selective-scan block.
#[derive(Debug, Clone)]
pub struct BlockState<T> {
    /// conv_w, conv_b, w_p, dt_bias.
    ids: [usize; 4],
    fifo: ConvFifo<T>,
    h: Vec<T>,
    xc: Vec<T>,
    proj: Vec<T>,
    consts: ScanConsts<T>,
    scratch: TickScratch<T>,
}

impl<T: Real> BlockState<T> {
    pub fn new(params: &ParamStore<T>, prefix: &str, groups: usize, d_state: usize, d_conv: usize) -> Self {
        let id = |n: &str| params.index_of(&format!("{prefix}.{n}"));
        Self {
            ids: [id("conv_w"), id("conv_b"), id("w_p"), id("dt_bias")],
            fifo: ConvFifo::new(d_conv, groups),
            h: vec![T::ZERO; groups * d_state],
            xc: vec![T::ZERO; groups],
            proj: vec![T::ZERO; 3 * d_state],
            consts: ScanConsts::new(
                params.expect(&format!("{prefix}.a_log")),
                params.expect(&format!("{prefix}.d")),
                groups,
            ),
            scratch: TickScratch::new(d_state),
        }
    }

    pub fn reset(&mut self) {
        self.h.fill(T::ZERO);
        self.fifo.reset();
    }

    pub fn hidden(&self) -> &[T] {
        &self.h
    }

    /// Scalars that persist between ticks.
    pub fn state_floats(&self) -> usize {
        self.h.len() + self.fifo.floats()
    }

    /// Per-tick scratch, excluded from the resident count.
    pub fn scratch_floats(&self) -> usize {
        self.xc.len() + self.proj.len() + 3 * self.scratch.dt.len()
    }

    pub fn step(&mut self, params: &ParamStore<T>, x: &[T], y: &mut [T]) {
        let [conv_w, conv_b, w_p, dt_bias] = self.ids.map(|i| params.at(i));
        causal_conv_step(x, &mut self.fifo, conv_w, conv_b, &mut self.xc);
        let ds = self.proj.len() / 3;
        kernels::linear(&self.xc, 1, self.xc.len(), w_p, 3 * ds, None, &mut self.proj);
        ssm_tick(
            &mut self.h,
            &self.xc,
            &self.proj,
            dt_bias,
            &self.consts,
            &mut self.scratch,
            y,
        );
    }
}

/// Fast-time state: embedding, sample block and the chirp summary.
#[derive(Debug, Clone)]
pub struct SampleSsmState<T> {
    block: BlockState<T>,
    aggregation: Aggregation,
    s_per_chirp: usize,
    embed: Mlp<T>,
    /// aggregate.conv_w, aggregate.conv_b when aggregating by convolution.
    agg_ids: Option<[usize; 2]>,
    z: Vec<T>,
    y: Vec<T>,
    agg_fifo: ConvFifo<T>,
    agg_out: Vec<T>,
    /// Running sum (mean modes) or last output (final_state).
    pool: Vec<T>,
    steps: usize,
}

impl<T: Real> SampleSsmState<T> {
    pub fn new(params: &ParamStore<T>, cfg: &ModelConfig) -> Self {
        let n = cfg.n_rx;
        let conv_agg = cfg.chirp_aggregation == Aggregation::Conv1d;
        let agg_width = if conv_agg { 3 } else { 0 };
        Self {
            block: BlockState::new(params, "sample", n, cfg.d_state, cfg.d_conv),
            aggregation: cfg.chirp_aggregation,
            s_per_chirp: cfg.s_per_chirp,
            embed: Mlp::new(params, "embed"),
            agg_ids: conv_agg.then(|| [params.index_of("aggregate.conv_w"), params.index_of("aggregate.conv_b")]),
            z: vec![T::ZERO; n],
            y: vec![T::ZERO; n],
            agg_fifo: ConvFifo::new(agg_width, n),
            agg_out: vec![T::ZERO; n],
            pool: vec![T::ZERO; n],
            steps: 0,
        }
    }

    pub fn reset(&mut self) {
        self.block.reset();
        self.agg_fifo.reset();
        self.pool.fill(T::ZERO);
        self.steps = 0;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn hidden(&self) -> &[T] {
        self.block.hidden()
    }

    /// Latest per-group outputs.
    pub fn output(&self) -> &[T] {
        &self.y
    }

    pub fn state_floats(&self) -> usize {
        self.block.state_floats() + self.agg_fifo.floats() + self.pool.len()
    }

    pub fn scratch_floats(&self) -> usize {
        self.block.scratch_floats() + self.embed.hidden.len() + self.z.len() + self.y.len() + self.agg_out.len()
    }

    /// Embeds, convolves and scans one `[Re | Im]` row.
    pub fn step(&mut self, params: &ParamStore<T>, row: &[T]) -> Result<()> {
        if self.steps == self.s_per_chirp {
            return Err(Error::contract(
                "chirp already complete; summarize before the next sample",
            ));
        }
        self.embed.run(params, row, &mut self.z);
        self.block.step(params, &self.z, &mut self.y);
        match self.aggregation {
            Aggregation::AvgPool => self.pool.iter_mut().zip(&self.y).for_each(|(p, &v)| *p += v),
            Aggregation::FinalState => self.pool.copy_from_slice(&self.y),
            Aggregation::Conv1d => {
                let [w, b] = self.agg_ids.expect("conv aggregation ids").map(|i| params.at(i));
                causal_conv_step(&self.y, &mut self.agg_fifo, w, b, &mut self.agg_out);
                self.pool.iter_mut().zip(&self.agg_out).for_each(|(p, &v)| *p += v);
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Pooled chirp vector `[n_rx]` before channel expansion.
    pub fn pooled(&self) -> Result<Vec<T>> {
        if self.steps != self.s_per_chirp {
            return Err(Error::contract(format!(
                "summary requested after {} of {} samples",
                self.steps, self.s_per_chirp
            )));
        }
        Ok(match self.aggregation {
            Aggregation::FinalState => self.pool.clone(),
            _ => {
                let n = T::from_usize(self.s_per_chirp);
                self.pool.iter().map(|&v| v / n).collect()
            }
        })
    }
}

/// Pools the finished chirp and expands it into a chirp token.
pub fn summarize_chirp<T: Real>(params: &ParamStore<T>, state: &SampleSsmState<T>) -> Result<Vec<T>> {
    let pooled = state.pooled()?;
    let mut out = vec![T::ZERO; params.expect("expand.b2").len()];
    Mlp::new(params, "expand").run(params, &pooled, &mut out);
    Ok(out)
}

/// Slow-time state: chirp block plus the rows of `U` for the current frame.
#[derive(Debug, Clone)]
pub struct ChirpSsmState<T> {
    block: BlockState<T>,
    width: usize,
    chirps: usize,
    u: Vec<T>,
    rows: usize,
}

impl<T: Real> ChirpSsmState<T> {
    pub fn new(params: &ParamStore<T>, cfg: &ModelConfig) -> Self {
        let tw = cfg.token_width();
        Self {
            block: BlockState::new(params, "chirp", tw, cfg.chirp_d_state, cfg.d_conv),
            width: tw,
            chirps: cfg.chirps_per_frame,
            u: vec![T::ZERO; cfg.chirps_per_frame * tw],
            rows: 0,
        }
    }

    /// Clears the recurrent state and `U`.
    pub fn reset(&mut self) {
        self.block.reset();
        self.flush();
    }

    /// Clears `U` only, keeping the recurrence.
    pub fn flush(&mut self) {
        self.u.fill(T::ZERO);
        self.rows = 0;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn u(&self) -> &[T] {
        &self.u[..self.rows * self.width]
    }

    pub fn hidden(&self) -> &[T] {
        self.block.hidden()
    }

    pub fn state_floats(&self) -> usize {
        self.block.state_floats() + self.u.len()
    }

    pub fn scratch_floats(&self) -> usize {
        self.block.scratch_floats()
    }
}

/// Advances the slow-time block by one token and appends `u_c` to `U`.
pub fn chirp_ssm_step<T: Real>(params: &ParamStore<T>, token: &[T], state: &mut ChirpSsmState<T>) -> Result<Vec<T>> {
    if state.rows == state.chirps {
        return Err(Error::contract(format!(
            "U already holds {} chirps; decode and flush first",
            state.chirps
        )));
    }
    let w = state.width;
    let mut u = vec![T::ZERO; w];
    state.block.step(params, token, &mut u);
    state.u[state.rows * w..(state.rows + 1) * w].copy_from_slice(&u);
    state.rows += 1;
    Ok(u)
}

/// Decoder and heads on a complete `U` (`[C × token_width]`). The second
/// value is the decoder's activation high-water mark in scalars.
pub fn decode_bev<T: Real>(params: &ParamStore<T>, cfg: &ModelConfig, u: &[T]) -> Result<(BevMaps<T>, usize)> {
    let (tw, c) = (cfg.token_width(), cfg.chirps_per_frame);
    if u.len() != c * tw {
        return Err(Error::contract(format!(
            "decoder needs {c} chirp rows, got {}",
            u.len() / tw.max(1)
        )));
    }
    let (h0, w0, cd) = (cfg.h0, cfg.w0, cfg.c_dec);
    let hw = h0 * w0;
    let mut f1 = vec![T::ZERO; hw];
    kernels::conv1d_mean(
        u,
        c,
        tw,
        params.expect("decoder.conv1d_w"),
        params.expect("decoder.conv1d_b"),
        &mut f1,
    );
    let mut peak = u.len() + hw;

    let mut x = f1;
    let (mut ch, mut h, mut w) = (1, h0, w0);
    for stage in ["1", "2"] {
        let mut up = vec![T::ZERO; ch * 4 * h * w];
        kernels::upsample2x(&x, ch, h, w, cfg.upsample, &mut up);
        peak = peak.max(x.len() + up.len());
        h *= 2;
        w *= 2;
        let mut out = vec![T::ZERO; cd * h * w];
        kernels::conv2d(
            &up,
            ch,
            h,
            w,
            params.expect(&format!("decoder.conv2d_{stage}_w")),
            3,
            params.expect(&format!("decoder.conv2d_{stage}_b")),
            &mut out,
        );
        peak = peak.max(up.len() + out.len());
        out.iter_mut().for_each(|v| *v = v.silu());
        x = out;
        ch = cd;
    }
    let plane = h * w;
    let mut head_floats = 0;
    let seg = match params.get("head.seg_w") {
        Some(wt) => {
            let mut s = vec![T::ZERO; plane];
            kernels::conv2d(&x, cd, h, w, wt.data(), 1, params.expect("head.seg_b"), &mut s);
            s.iter_mut().for_each(|v| *v = v.sigmoid());
            head_floats += plane;
            Some(s)
        }
        None => None,
    };
    let (objectness, offsets) = match params.get("head.det_w") {
        Some(wt) => {
            let mut raw = vec![T::ZERO; 3 * plane];
            kernels::conv2d(&x, cd, h, w, wt.data(), 1, params.expect("head.det_b"), &mut raw);
            head_floats += 3 * plane;
            let offsets = raw[plane..].to_vec();
            let obj = raw[..plane].iter().map(|v| v.sigmoid()).collect();
            (Some(obj), Some(offsets))
        }
        None => (None, None),
    };
    peak = peak.max(x.len() + head_floats);
    Ok((
        BevMaps {
            h,
            w,
            seg,
            objectness,
            offsets,
        },
        peak,
    ))
}
