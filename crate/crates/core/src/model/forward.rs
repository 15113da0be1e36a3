//! Whole-frame forward pass recorded on a [`Tape`]. This is the reference
//! ("batch") semantics; the streaming runtime reproduces it tick by tick.

use super::config::{Aggregation, ModelConfig};
use super::params::{ParamStore, ParamVars};
use crate::error::{Error, Result};
use crate::sim::AdcFrame;
use crate::tensor::{Array, Pool, Real, Tape, Var};

/// Decoded outputs on the `(4·h0)×(4·w0)` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMaps<T> {
    pub h: usize,
    pub w: usize,
    /// Free-space probability.
    pub seg: Option<Vec<T>>,
    pub objectness: Option<Vec<T>>,
    /// `[2×h×w]`: Δrange plane then Δazimuth plane.
    pub offsets: Option<Vec<T>>,
}

impl<T: Real> BevMaps<T> {
    /// Largest absolute difference relative to `max(1, |a|)` over every map.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        let pairs = [
            (&self.seg, &other.seg),
            (&self.objectness, &other.objectness),
            (&self.offsets, &other.offsets),
        ];
        let mut worst = 0.0f64;
        for (a, b) in pairs {
            match (a, b) {
                (Some(a), Some(b)) if a.len() == b.len() => {
                    for (x, y) in a.iter().zip(b) {
                        let (x, y) = (x.to_f64(), y.to_f64());
                        worst = worst.max((x - y).abs() / x.abs().max(1.0));
                    }
                }
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
        worst
    }

    /// Segmentation thresholded at 0.5 (1 = free).
    pub fn seg_mask(&self) -> Option<Vec<u8>> {
        self.seg
            .as_ref()
            .map(|s| s.iter().map(|v| u8::from(v.to_f64() >= 0.5)).collect())
    }
}

/// Converts one interleaved receiver vector into the model input row
/// `[Re(x) | Im(x)]`.
pub fn sample_row<T: Real>(interleaved: &[f32], out: &mut [T]) {
    let n = interleaved.len() / 2;
    for rx in 0..n {
        out[rx] = T::from_f64(interleaved[2 * rx] as f64);
        out[n + rx] = T::from_f64(interleaved[2 * rx + 1] as f64);
    }
}

/// All `C·S` input rows of a frame, `[L × 2·n_rx]`.
pub fn frame_rows<T: Real>(frame: &AdcFrame) -> Vec<T> {
    let w = 2 * frame.dims.n_rx;
    let mut rows = vec![T::ZERO; frame.ticks() * w];
    for t in 0..frame.ticks() {
        sample_row(frame.tick(t), &mut rows[t * w..(t + 1) * w]);
    }
    rows
}

pub fn check_frame_dims(frame: &AdcFrame, cfg: &ModelConfig) -> Result<()> {
    let d = frame.dims;
    if (d.chirps, d.samples, d.n_rx) != (cfg.chirps_per_frame, cfg.s_per_chirp, cfg.n_rx) {
        return Err(Error::config(format!(
            "frame dims (C={}, S={}, N_Rx={}) do not match model (C={}, S={}, N_Rx={})",
            d.chirps, d.samples, d.n_rx, cfg.chirps_per_frame, cfg.s_per_chirp, cfg.n_rx
        )));
    }
    Ok(())
}

/// Handles to the interesting nodes of one recorded frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameGraph {
    /// Per-tick sample-SSM outputs `[C·S × n_rx]`.
    pub sample_y: Var,
    /// Expanded chirp tokens `[C × token_width]`.
    pub tokens: Var,
    /// Chirp-SSM outputs `U`, `[C × token_width]`.
    pub u: Var,
    pub seg: Option<Var>,
    pub objectness: Option<Var>,
    pub offsets: Option<Var>,
}

fn mlp<T: Real>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.linear(x, p.get(&format!("{prefix}.w1")), Some(p.get(&format!("{prefix}.b1"))))?;
    let h = tape.silu(h);
    tape.linear(h, p.get(&format!("{prefix}.w2")), Some(p.get(&format!("{prefix}.b2"))))
}

fn ssm_block<T: Real>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, x: Var, seg: usize) -> Result<Var> {
    let g = |n: &str| p.get(&format!("{prefix}.{n}"));
    let xc = tape.causal_conv(x, g("conv_w"), g("conv_b"), seg)?;
    let proj = tape.linear(xc, g("w_p"), None)?;
    tape.selective_scan(proj, xc, g("dt_bias"), g("a_log"), g("d"), seg)
}

/// Records the full frame given its input rows `[C·S × 2·n_rx]`.
pub fn build_frame_graph<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    rows: Var,
) -> Result<FrameGraph> {
    let s = cfg.s_per_chirp;
    let z = mlp(tape, p, "embed", rows)?;
    let sample_y = ssm_block(tape, p, "sample", z, s)?;
    let pooled = match cfg.chirp_aggregation {
        Aggregation::AvgPool => tape.segment_pool(sample_y, s, Pool::Mean)?,
        Aggregation::FinalState => tape.segment_pool(sample_y, s, Pool::Last)?,
        Aggregation::Conv1d => {
            let c = tape.causal_conv(sample_y, p.get("aggregate.conv_w"), p.get("aggregate.conv_b"), s)?;
            tape.segment_pool(c, s, Pool::Mean)?
        }
    };
    let tokens = mlp(tape, p, "expand", pooled)?;
    let u = ssm_block(tape, p, "chirp", tokens, cfg.chirps_per_frame)?;
    let (seg, objectness, offsets) = decode_graph(tape, p, cfg, u)?;
    Ok(FrameGraph {
        sample_y,
        tokens,
        u,
        seg,
        objectness,
        offsets,
    })
}

/// Decoder and heads on a complete `U`.
#[allow(clippy::type_complexity)]
pub fn decode_graph<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    u: Var,
) -> Result<(Option<Var>, Option<Var>, Option<Var>)> {
    let rows = tape.shape(u)[0];
    if rows != cfg.chirps_per_frame {
        return Err(Error::contract(format!(
            "decoder needs {} chirp rows, got {rows}",
            cfg.chirps_per_frame
        )));
    }
    let f1 = tape.conv1d_mean(u, p.get("decoder.conv1d_w"), p.get("decoder.conv1d_b"))?;
    let mut x = tape.reshape(f1, &[1, cfg.h0, cfg.w0])?;
    for stage in ["1", "2"] {
        x = tape.upsample2x(x, cfg.upsample)?;
        x = tape.conv2d(
            x,
            p.get(&format!("decoder.conv2d_{stage}_w")),
            p.get(&format!("decoder.conv2d_{stage}_b")),
        )?;
        x = tape.silu(x);
    }
    let seg = match p.try_get("head.seg_w") {
        Some(w) => {
            let logits = tape.conv2d(x, w, p.get("head.seg_b"))?;
            Some(tape.sigmoid(logits))
        }
        None => None,
    };
    let (obj, off) = match p.try_get("head.det_w") {
        Some(w) => {
            let raw = tape.conv2d(x, w, p.get("head.det_b"))?;
            let o = tape.narrow(raw, 0, 1)?;
            let o = tape.sigmoid(o);
            (Some(o), Some(tape.narrow(raw, 1, 2)?))
        }
        None => (None, None),
    };
    Ok((seg, obj, off))
}

/// Inference on one frame from zero state.
pub fn forward_frame<T: Real>(frame: &AdcFrame, params: &ParamStore<T>, cfg: &ModelConfig) -> Result<BevMaps<T>> {
    check_frame_dims(frame, cfg)?;
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false);
    let rows = tape.constant(Array::new(vec![frame.ticks(), 2 * cfg.n_rx], frame_rows(frame))?);
    let g = build_frame_graph(&mut tape, &p, cfg, rows)?;
    Ok(maps_from_graph(&tape, &g, cfg))
}

pub fn maps_from_graph<T: Real>(tape: &Tape<T>, g: &FrameGraph, cfg: &ModelConfig) -> BevMaps<T> {
    let (h, w) = cfg.output_grid();
    let take = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec());
    BevMaps {
        h,
        w,
        seg: take(g.seg),
        objectness: take(g.objectness),
        offsets: take(g.offsets),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Heads;
    use crate::sim::{synthesize_frame, Dims, Scene};

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::synthetic();
        cfg.n_rx = 2;
        cfg.s_per_chirp = 8;
        cfg.chirps_per_frame = 4;
        cfg.d_state = 4;
        cfg.chirp_d_state = 4;
        cfg.h0 = 4;
        cfg.w0 = 4;
        cfg.c_dec = 3;
        cfg.heads = Heads::BOTH;
        cfg
    }

    fn frame(cfg: &ModelConfig, seed: u64) -> AdcFrame {
        let scene = Scene::new(
            vec![],
            0.0,
            seed,
            Dims::new(cfg.chirps_per_frame, cfg.s_per_chirp, cfg.n_rx),
        )
        .unwrap();
        synthesize_frame(&scene)
    }

    #[test]
    fn output_grid_and_ranges() {
        let cfg = tiny();
        let params = ParamStore::<f64>::init(&cfg);
        let maps = forward_frame(&frame(&cfg, 1), &params, &cfg).unwrap();
        assert_eq!((maps.h, maps.w), (16, 16));
        assert!(maps.seg.unwrap().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(maps.objectness.unwrap().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(maps.offsets.unwrap().len(), 2 * 16 * 16);
    }

    #[test]
    fn identical_frames_identical_outputs() {
        let cfg = tiny();
        let params = ParamStore::<f64>::init(&cfg);
        let f = frame(&cfg, 5);
        assert_eq!(
            forward_frame(&f, &params, &cfg).unwrap(),
            forward_frame(&f, &params, &cfg).unwrap()
        );
    }

    #[test]
    fn zero_decoder_input_gives_half() {
        let cfg = tiny();
        let mut params = ParamStore::<f64>::init(&cfg);
        params.get_mut("decoder.conv1d_w").unwrap().data_mut().fill(0.0);
        params.get_mut("head.seg_w").unwrap().data_mut().fill(0.0);
        let maps = forward_frame(&frame(&cfg, 2), &params, &cfg).unwrap();
        assert!(maps.seg.unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mismatched_frame_is_config_error() {
        let cfg = tiny();
        let params = ParamStore::<f64>::init(&cfg);
        let mut other = cfg.clone();
        other.s_per_chirp = 4;
        let err = forward_frame(&frame(&other, 0), &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
