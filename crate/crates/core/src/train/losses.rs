//! Training losses recorded on the tape so they backpropagate.

use crate::error::{Error, Result};
use crate::tensor::{Array, Real, Tape, Unary, Var};

pub const PROB_EPS: f64 = 1e-7;
pub const JACCARD_SMOOTH: f64 = 1.0;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

fn constant_like<T: Real>(tape: &mut Tape<T>, like: Var, data: Vec<T>, op: &'static str) -> Result<Var> {
    let shape = tape.shape(like).to_vec();
    if data.len() != tape.value(like).numel() {
        return Err(Error::Shape {
            op,
            lhs: shape,
            rhs: vec![data.len()],
        });
    }
    Ok(tape.constant(Array::new(shape, data)?))
}

/// Mean binary cross-entropy with `p` clamped to `[1e-7, 1-1e-7]`.
pub fn bce<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[T]) -> Result<Var> {
    let t = constant_like(tape, pred, target.to_vec(), "loss_bce")?;
    let one_minus_t = constant_like(tape, pred, target.iter().map(|&v| T::ONE - v).collect(), "loss_bce")?;
    let eps = T::from_f64(PROB_EPS);
    let p = tape.clamp(pred, eps, T::ONE - eps);
    let lp = tape.ln(p);
    let q = tape.scale(p, -T::ONE);
    let q = tape.add_const(q, T::ONE);
    let lq = tape.ln(q);
    let a = tape.mul(t, lp)?;
    let b = tape.mul(one_minus_t, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -T::ONE))
}

/// `1 - (Σpt + 1) / (Σp + Σt - Σpt + 1)`.
pub fn jaccard<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[T]) -> Result<Var> {
    let t = constant_like(tape, pred, target.to_vec(), "loss_jaccard")?;
    let pt = tape.mul(pred, t)?;
    let inter = tape.sum(pt);
    let sp = tape.sum(pred);
    let st: T = target.iter().copied().sum();
    let smooth = T::from_f64(JACCARD_SMOOTH);
    let union = tape.sub(sp, inter)?;
    let union = tape.add_const(union, st + smooth);
    let num = tape.add_const(inter, smooth);
    let ratio = tape.div(num, union)?;
    let neg = tape.scale(ratio, -T::ONE);
    Ok(tape.add_const(neg, T::ONE))
}

/// Focal loss (γ = 2, α = 0.25 on positives, 0.75 on negatives), mean over
/// cells. `target` is binary.
pub fn focal<T: Real>(tape: &mut Tape<T>, objectness: Var, target: &[T]) -> Result<Var> {
    let alpha = T::from_f64(FOCAL_ALPHA);
    // p_t = (1 - t) + (2t - 1)·p
    let slope = constant_like(
        tape,
        objectness,
        target.iter().map(|&t| t + t - T::ONE).collect(),
        "loss_focal",
    )?;
    let offset = constant_like(
        tape,
        objectness,
        target.iter().map(|&t| T::ONE - t).collect(),
        "loss_focal",
    )?;
    let weight = constant_like(
        tape,
        objectness,
        target
            .iter()
            .map(|&t| if t > T::from_f64(0.5) { alpha } else { T::ONE - alpha })
            .collect(),
        "loss_focal",
    )?;
    let sp = tape.mul(slope, objectness)?;
    let pt = tape.add(sp, offset)?;
    let eps = T::from_f64(PROB_EPS);
    let pt = tape.clamp(pt, eps, T::ONE);
    let q = tape.scale(pt, -T::ONE);
    let q = tape.add_const(q, T::ONE);
    let q2 = tape.mul(q, q)?;
    let lp = tape.ln(pt);
    let f = tape.mul(q2, lp)?;
    let f = tape.mul(weight, f)?;
    let m = tape.mean(f);
    Ok(tape.scale(m, -T::ONE))
}

/// Smooth-L1 (β = 1) summed over both offsets, averaged over positive cells.
/// `None` when there are no positives.
pub fn offset_smooth_l1<T: Real>(
    tape: &mut Tape<T>,
    offsets: Var,
    target: &[T],
    positive: &[bool],
) -> Result<Option<Var>> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let plane = positive.len();
    let mask: Vec<T> = (0..2 * plane)
        .map(|i| if positive[i % plane] { T::ONE } else { T::ZERO })
        .collect();
    let t = constant_like(tape, offsets, target.to_vec(), "loss_smooth_l1")?;
    let m = constant_like(tape, offsets, mask, "loss_smooth_l1")?;
    let d = tape.sub(offsets, t)?;
    let d = tape.mul(d, m)?;
    let l = tape.unary(Unary::SmoothL1, d);
    let s = tape.sum(l);
    Ok(Some(tape.scale(s, T::ONE / T::from_usize(n_pos))))
}

/// Detection targets split into tape-friendly planes.
#[derive(Debug, Clone)]
pub struct DetTargets<T> {
    pub objectness: Vec<T>,
    /// `[2×h×w]`, Δrange plane then Δazimuth plane.
    pub offsets: Vec<T>,
    pub positive: Vec<bool>,
}

impl<T: Real> DetTargets<T> {
    /// From interleaved per-cell `(objectness, Δrange, Δazimuth)`.
    pub fn from_interleaved(det: &[f32]) -> Self {
        let cells = det.len() / 3;
        let mut offsets = vec![T::ZERO; 2 * cells];
        let mut objectness = Vec::with_capacity(cells);
        let mut positive = Vec::with_capacity(cells);
        for i in 0..cells {
            let o = det[3 * i];
            objectness.push(T::from_f64(o as f64));
            positive.push(o > 0.5);
            offsets[i] = T::from_f64(det[3 * i + 1] as f64);
            offsets[cells + i] = T::from_f64(det[3 * i + 2] as f64);
        }
        Self {
            objectness,
            offsets,
            positive,
        }
    }
}

/// Focal + smooth-L1 with weight 1:1.
pub fn detection<T: Real>(tape: &mut Tape<T>, objectness: Var, offsets: Var, target: &DetTargets<T>) -> Result<Var> {
    let f = focal(tape, objectness, &target.objectness)?;
    match offset_smooth_l1(tape, offsets, &target.offsets, &target.positive)? {
        Some(r) => tape.add(f, r),
        None => Ok(f),
    }
}
