//! Mask overlap, Chamfer distance and point-detection metrics. Masks are
//! row-major `u8` grids where nonzero means foreground.

/// `|A∩B| / |A∪B|`, 1 when both are empty.
pub fn iou(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn dice(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        total += usize::from(x) + usize::from(y);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn accuracy(a: &[u8], b: &[u8]) -> f64 {
    let hits = a.iter().zip(b).filter(|(&x, &y)| (x != 0) == (y != 0)).count();
    hits as f64 / a.len().max(1) as f64
}

/// Foreground columns of each row.
fn row_columns(m: &[u8], h: usize, w: usize) -> Vec<Vec<usize>> {
    (0..h)
        .map(|r| (0..w).filter(|&c| m[r * w + c] != 0).collect())
        .collect()
}

/// Mean over foreground cells of `a` of the distance to the nearest
/// foreground cell of `b` (which must be nonempty).
fn directed(a: &[u8], b_rows: &[Vec<usize>], h: usize, w: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            if a[r * w + c] == 0 {
                continue;
            }
            let mut best = usize::MAX;
            for (rb, cols) in b_rows.iter().enumerate() {
                if cols.is_empty() {
                    continue;
                }
                let dr = r.abs_diff(rb);
                if dr * dr >= best {
                    continue;
                }
                let i = cols.partition_point(|&x| x < c);
                let dc = [i.checked_sub(1), (i < cols.len()).then_some(i)]
                    .into_iter()
                    .flatten()
                    .map(|j| c.abs_diff(cols[j]))
                    .min()
                    .expect("nonempty row");
                best = best.min(dr * dr + dc * dc);
            }
            sum += (best as f64).sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

/// Symmetric mean nearest-neighbour distance in cells. One empty mask gives
/// the grid diagonal; two empty masks give 0.
pub fn chamfer(a: &[u8], b: &[u8], h: usize, w: usize) -> f64 {
    let (ea, eb) = (a.iter().all(|&v| v == 0), b.iter().all(|&v| v == 0));
    match (ea, eb) {
        (true, true) => 0.0,
        (true, false) | (false, true) => ((h * h + w * w) as f64).sqrt(),
        (false, false) => {
            let (ra, rb) = (row_columns(a, h, w), row_columns(b, h, w));
            (directed(a, &rb, h, w) + directed(b, &ra, h, w)) / 2.0
        }
    }
}

/// A point in continuous grid coordinates (cells).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

/// A scored detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub at: Point,
}

/// Local maxima of `objectness` above `thresh` in a 3×3 window; equal
/// neighbours are broken in favour of the lower index. Positions add the
/// predicted offsets (`[2×h×w]`) to the cell centre.
pub fn extract_peaks(objectness: &[f64], offsets: &[f64], h: usize, w: usize, thresh: f64) -> Vec<Detection> {
    let plane = h * w;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let v = objectness[i];
            if v <= thresh {
                continue;
            }
            let mut peak = true;
            'win: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    let u = objectness[j];
                    if u > v || (u == v && j < i) {
                        peak = false;
                        break 'win;
                    }
                }
            }
            if peak {
                out.push(Detection {
                    score: v,
                    at: Point {
                        row: r as f64 + 0.5 + offsets[i],
                        col: c as f64 + 0.5 + offsets[plane + i],
                    },
                });
            }
        }
    }
    out
}

/// Ground-truth points from interleaved label cells: the positive cell whose
/// offsets lie in `[-0.5, 0.5)` is the one containing the target.
pub fn targets_from_labels(det: &[f32], w: usize) -> Vec<Point> {
    let inside = |v: f32| (-0.5..0.5).contains(&v);
    det.chunks_exact(3)
        .enumerate()
        .filter(|(_, c)| c[0] > 0.5 && inside(c[1]) && inside(c[2]))
        .map(|(i, c)| Point {
            row: (i / w) as f64 + 0.5 + c[1] as f64,
            col: (i % w) as f64 + 0.5 + c[2] as f64,
        })
        .collect()
}

/// Matches at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MatchStats {
    pub predictions: usize,
    pub targets: usize,
    pub matched: usize,
    /// Sum of |Δrow| and |Δcol| over matched pairs.
    pub range_abs: f64,
    pub azimuth_abs: f64,
}

impl MatchStats {
    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.predictions == 0 {
            1.0
        } else {
            self.matched as f64 / self.predictions as f64
        }
    }

    /// 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        if self.targets == 0 {
            1.0
        } else {
            self.matched as f64 / self.targets as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn merge(&mut self, o: &MatchStats) {
        self.predictions += o.predictions;
        self.targets += o.targets;
        self.matched += o.matched;
        self.range_abs += o.range_abs;
        self.azimuth_abs += o.azimuth_abs;
    }
}

/// Greedy matching in descending score order: each detection takes the
/// nearest unmatched target within `dist_thresh` cells.
pub fn match_detections(dets: &[Detection], targets: &[Point], dist_thresh: f64) -> MatchStats {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; targets.len()];
    let mut stats = MatchStats {
        predictions: dets.len(),
        targets: targets.len(),
        ..Default::default()
    };
    for i in order {
        let d = dets[i].at;
        let best = targets
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, t)| (j, (t.row - d.row).hypot(t.col - d.col)))
            .filter(|&(_, dist)| dist <= dist_thresh)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((j, _)) = best {
            taken[j] = true;
            stats.matched += 1;
            stats.range_abs += (targets[j].row - d.row).abs();
            stats.azimuth_abs += (targets[j].col - d.col).abs();
        }
    }
    stats
}

/// Score thresholds swept for mAP / mAR.
pub const SWEEP: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const DEFAULT_SCORE_THRESH: f64 = 0.5;
pub const DEFAULT_DIST_THRESH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionReport {
    pub f1: f64,
    pub map: f64,
    pub mar: f64,
    /// Mean absolute range error of matches, grid cells.
    pub range_error: f64,
    /// Mean absolute azimuth error of matches, grid cells.
    pub azimuth_error: f64,
}

/// Accumulates detection statistics over frames.
#[derive(Debug, Clone)]
pub struct DetectionAccumulator {
    pub score_thresh: f64,
    pub dist_thresh: f64,
    at_thresh: MatchStats,
    sweep: [MatchStats; 9],
}

impl Default for DetectionAccumulator {
    fn default() -> Self {
        Self::new(DEFAULT_SCORE_THRESH, DEFAULT_DIST_THRESH)
    }
}

impl DetectionAccumulator {
    pub fn new(score_thresh: f64, dist_thresh: f64) -> Self {
        assert!(score_thresh > 0.0 && dist_thresh > 0.0, "thresholds must be positive");
        Self {
            score_thresh,
            dist_thresh,
            at_thresh: MatchStats::default(),
            sweep: [MatchStats::default(); 9],
        }
    }

    pub fn add_frame(&mut self, objectness: &[f64], offsets: &[f64], h: usize, w: usize, targets: &[Point]) {
        let floor = self.score_thresh.min(SWEEP[0]);
        let all = extract_peaks(objectness, offsets, h, w, floor);
        let above = |t: f64| all.iter().copied().filter(|d| d.score > t).collect::<Vec<_>>();
        self.at_thresh
            .merge(&match_detections(&above(self.score_thresh), targets, self.dist_thresh));
        for (slot, &t) in self.sweep.iter_mut().zip(&SWEEP) {
            slot.merge(&match_detections(&above(t), targets, self.dist_thresh));
        }
    }

    pub fn stats(&self) -> MatchStats {
        self.at_thresh
    }

    pub fn report(&self) -> DetectionReport {
        let s = self.at_thresh;
        let per = |v: f64| if s.matched == 0 { 0.0 } else { v / s.matched as f64 };
        DetectionReport {
            f1: s.f1(),
            map: self.sweep.iter().map(MatchStats::precision).sum::<f64>() / SWEEP.len() as f64,
            mar: self.sweep.iter().map(MatchStats::recall).sum::<f64>() / SWEEP.len() as f64,
            range_error: per(s.range_abs),
            azimuth_error: per(s.azimuth_abs),
        }
    }
}
