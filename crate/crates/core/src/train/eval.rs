//! Validation over a set of labelled frames.

use std::fmt;

use super::metrics::{accuracy, chamfer, dice, iou, targets_from_labels, DetectionAccumulator, DetectionReport};
use crate::dataset::Sample;
use crate::error::Result;
use crate::model::{forward_frame, BevMaps, ModelConfig, ParamStore};
use crate::tensor::Real;

/// Segmentation scores are per-frame values of the free class averaged over
/// frames; detection statistics are pooled over all frames.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalReport {
    pub frames: usize,
    pub miou: f64,
    pub dice: f64,
    pub pixel_accuracy: f64,
    pub chamfer: f64,
    pub detection: Option<DetectionReport>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames={}", self.frames)?;
        writeln!(f, "miou={:.6}", self.miou)?;
        writeln!(f, "dice={:.6}", self.dice)?;
        writeln!(f, "pixel_accuracy={:.6}", self.pixel_accuracy)?;
        writeln!(f, "chamfer={:.6}", self.chamfer)?;
        if let Some(d) = &self.detection {
            writeln!(f, "det_f1={:.6}", d.f1)?;
            writeln!(f, "det_map={:.6}", d.map)?;
            writeln!(f, "det_mar={:.6}", d.mar)?;
            writeln!(f, "det_range_error={:.6}", d.range_error)?;
            writeln!(f, "det_azimuth_error={:.6}", d.azimuth_error)?;
        }
        Ok(())
    }
}

/// Per-frame segmentation scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScores {
    pub iou: f64,
    pub dice: f64,
    pub accuracy: f64,
    pub chamfer: f64,
}

pub fn seg_scores(pred: &[u8], target: &[u8], h: usize, w: usize) -> SegScores {
    SegScores {
        iou: iou(pred, target),
        dice: dice(pred, target),
        accuracy: accuracy(pred, target),
        chamfer: chamfer(pred, target, h, w),
    }
}

/// Folds per-frame outputs into an [`EvalReport`] in frame order.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    frames: usize,
    seg: Vec<SegScores>,
    det: Option<DetectionAccumulator>,
}

impl EvalAccumulator {
    pub fn add<T: Real>(&mut self, maps: &BevMaps<T>, sample: &Sample) {
        self.frames += 1;
        let l = &sample.labels;
        if let Some(mask) = maps.seg_mask() {
            self.seg.push(seg_scores(&mask, &l.seg, l.h, l.w));
        }
        if let (Some(obj), Some(off)) = (&maps.objectness, &maps.offsets) {
            let obj: Vec<f64> = obj.iter().map(|v| v.to_f64()).collect();
            let off: Vec<f64> = off.iter().map(|v| v.to_f64()).collect();
            let targets = targets_from_labels(&l.det, l.w);
            self.det
                .get_or_insert_with(DetectionAccumulator::default)
                .add_frame(&obj, &off, maps.h, maps.w, &targets);
        }
    }

    pub fn report(&self) -> EvalReport {
        let n = self.seg.len().max(1) as f64;
        let mean = |f: fn(&SegScores) -> f64| self.seg.iter().map(f).sum::<f64>() / n;
        EvalReport {
            frames: self.frames,
            miou: mean(|s| s.iou),
            dice: mean(|s| s.dice),
            pixel_accuracy: mean(|s| s.accuracy),
            chamfer: mean(|s| s.chamfer),
            detection: self.det.as_ref().map(DetectionAccumulator::report),
        }
    }
}

/// Worker count from `SSMRADNET_THREADS`, else 1.
pub fn thread_cap() -> usize {
    std::env::var("SSMRADNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Runs the batch forward on every sample, optionally across worker threads.
/// Results are folded in frame order, so the report does not depend on the
/// worker count.
pub fn predict_all<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    samples: &[Sample],
    threads: usize,
) -> Result<Vec<BevMaps<T>>> {
    let threads = threads.clamp(1, samples.len().max(1));
    if threads == 1 {
        return samples.iter().map(|s| forward_frame(&s.frame, params, cfg)).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<BevMaps<T>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| forward_frame(&s.frame, params, cfg))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    samples: &[Sample],
    threads: usize,
) -> Result<EvalReport> {
    let maps = predict_all(params, cfg, samples, threads)?;
    let mut acc = EvalAccumulator::default();
    for (m, s) in maps.iter().zip(samples) {
        acc.add(m, s);
    }
    Ok(acc.report())
}
