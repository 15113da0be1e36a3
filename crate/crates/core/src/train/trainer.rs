//! Mini-batch Adam training with per-epoch validation and best-checkpoint
//! selection.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, EvalReport};
use super::losses::{self, DetTargets};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::forward::{build_frame_graph, check_frame_dims, frame_rows};
use crate::model::{checkpoint, ModelConfig, ParamStore, ParamVars};
use crate::tensor::gradcheck::{rel_err, GradCheck};
use crate::tensor::{Adam, AdamConfig, Array, Real, Tape, Var};

/// Segmentation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegLoss {
    Bce,
    Jaccard,
    BceJaccard,
}

impl fmt::Display for SegLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegLoss::Bce => "bce",
            SegLoss::Jaccard => "jaccard",
            SegLoss::BceJaccard => "bce+jaccard",
        })
    }
}

impl FromStr for SegLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(SegLoss::Bce),
            "jaccard" => Ok(SegLoss::Jaccard),
            "bce+jaccard" => Ok(SegLoss::BceJaccard),
            _ => Err(Error::config(format!(
                "unknown seg_loss '{s}' (bce | jaccard | bce+jaccard)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seg_loss: SegLoss,
    /// Train the detection head (focal + smooth-L1) when the model has one.
    pub det_loss: bool,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 5e-6,
            seg_loss: SegLoss::Jaccard,
            det_loss: true,
            seed: 0,
            eval_every: 1,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "seg_loss",
    "det_loss",
    "seed",
    "eval_every",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("train.{key}: cannot parse '{value}'")))
}

impl TrainConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "seg_loss" => self.seg_loss.to_string(),
            "det_loss" => self.det_loss.to_string(),
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seg_loss" => self.seg_loss = value.trim().parse()?,
            "det_loss" => self.det_loss = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown train key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("train.batch_size and train.eval_every must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("train.lr and train.weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// A training frame converted to the working precision once.
struct Prepared<T> {
    rows: Array<T>,
    seg: Vec<T>,
    det: DetTargets<T>,
}

pub fn check_sample(sample: &Sample, cfg: &ModelConfig) -> Result<()> {
    check_frame_dims(&sample.frame, cfg)?;
    let grid = cfg.output_grid();
    if (sample.labels.h, sample.labels.w) != grid {
        return Err(Error::config(format!(
            "label grid {}×{} does not match model output {}×{}",
            sample.labels.h, sample.labels.w, grid.0, grid.1
        )));
    }
    Ok(())
}

fn prepare<T: Real>(s: &Sample, cfg: &ModelConfig) -> Result<Prepared<T>> {
    check_sample(s, cfg)?;
    Ok(Prepared {
        rows: Array::new(vec![s.frame.ticks(), 2 * cfg.n_rx], frame_rows(&s.frame))?,
        seg: s.labels.seg.iter().map(|&v| T::from_f64(v as f64)).collect(),
        det: DetTargets::from_interleaved(&s.labels.det),
    })
}

/// Records the forward pass and the configured loss for one frame.
fn frame_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    sample: &Prepared<T>,
) -> Result<(Var, ParamVars)> {
    let vars = params.register(tape, true);
    let rows = tape.constant(sample.rows.clone());
    let g = build_frame_graph(tape, &vars, cfg, rows)?;
    let mut terms = Vec::new();
    if let Some(seg) = g.seg {
        if matches!(tc.seg_loss, SegLoss::Bce | SegLoss::BceJaccard) {
            terms.push(losses::bce(tape, seg, &sample.seg)?);
        }
        if matches!(tc.seg_loss, SegLoss::Jaccard | SegLoss::BceJaccard) {
            terms.push(losses::jaccard(tape, seg, &sample.seg)?);
        }
    }
    if let (true, Some(obj), Some(off)) = (tc.det_loss, g.objectness, g.offsets) {
        terms.push(losses::detection(tape, obj, off, &sample.det)?);
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| Error::config("no trainable head: enable segmentation or det_loss"))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((total, vars))
}

/// Loss and parameter gradients for one frame, added into the `params`
/// grads with weight `scale`. Returns the loss.
pub fn accumulate_frame<T: Real>(
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    sample: &Sample,
    scale: T,
) -> Result<f64> {
    let p = prepare(sample, cfg)?;
    let mut tape = Tape::new();
    let (loss, vars) = frame_loss(&mut tape, params, cfg, tc, &p)?;
    tape.backward(loss)?;
    params.accumulate_grads(&tape, &vars, scale);
    Ok(tape.value(loss).item().to_f64())
}

/// Tape gradients of the frame loss against central differences, one
/// [`GradCheck`] per named parameter. At most `max_entries` entries of each
/// tensor are probed (evenly strided).
pub fn gradient_audit(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    sample: &Sample,
    max_entries: usize,
) -> Result<Vec<(String, GradCheck)>> {
    let p = prepare::<f64>(sample, cfg)?;
    let loss_at = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = frame_loss(&mut tape, store, cfg, tc, &p)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let (loss, vars) = frame_loss(&mut tape, params, cfg, tc, &p)?;
    tape.backward(loss)?;

    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (i, name) in params.names().iter().enumerate() {
        let n = params.at(i).len();
        let analytic = tape
            .grad(vars.all()[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let mut check = GradCheck {
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
        };
        for j in (0..n).step_by(n.div_ceil(max_entries.max(1)).max(1)) {
            let theta = params.at(i)[j];
            let h = 1e-4 * theta.abs().max(1.0);
            let arr = probe.get_mut(name).expect("same layout");
            arr.data_mut()[j] = theta + h;
            let up = loss_at(&probe)?;
            probe.get_mut(name).expect("same layout").data_mut()[j] = theta - h;
            let down = loss_at(&probe)?;
            probe.get_mut(name).expect("same layout").data_mut()[j] = theta;
            let rel = rel_err(analytic[j], (up - down) / (2.0 * h));
            check.checked += 1;
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = Some((i, j));
            }
        }
        out.push((name.clone(), check));
    }
    Ok(out)
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<EvalReport>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_miou,val_dice,val_chamfer,val_f1";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        match &self.val {
            Some(v) => format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                self.epoch,
                self.train_loss,
                v.miou,
                v.dice,
                v.chamfer,
                v.detection.map(|d| format!("{:.6}", d.f1)).unwrap_or_default()
            ),
            None => format!("{},{:.6},,,,", self.epoch, self.train_loss),
        }
    }
}

/// Where a run writes its artefacts.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters with the best validation mIoU (the last epoch when there is
    /// no validation set).
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub best_report: Option<EvalReport>,
    pub last: ParamStore<T>,
    pub log: Vec<EpochLog>,
}

pub struct Trainer<'a, T> {
    cfg: &'a ModelConfig,
    tc: &'a TrainConfig,
    params: ParamStore<T>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    train: Vec<Prepared<T>>,
    threads: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(cfg: &'a ModelConfig, tc: &'a TrainConfig, params: ParamStore<T>, train: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        tc.validate()?;
        params.check_layout(cfg)?;
        let train = train.iter().map(|s| prepare(s, cfg)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            tc,
            params,
            adam: Adam::new(AdamConfig {
                lr: tc.lr,
                weight_decay: tc.weight_decay,
                ..AdamConfig::default()
            }),
            rng: ChaCha8Rng::seed_from_u64(tc.seed),
            train,
            threads: 1,
        })
    }

    /// Worker count for validation.
    pub fn with_eval_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// One pass over the shuffled training set; returns the mean frame loss.
    pub fn epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.tc.batch_size) {
            self.params.zero_grads();
            let scale = T::ONE / T::from_usize(batch.len());
            for &i in batch {
                let mut tape = Tape::new();
                let (loss, vars) = frame_loss(&mut tape, &self.params, self.cfg, self.tc, &self.train[i])?;
                let value = tape.value(loss).item().to_f64();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("training loss became {value}")));
                }
                tape.backward(loss)?;
                self.params.accumulate_grads(&tape, &vars, scale);
                total += value;
            }
            self.adam.step(self.params.arrays_mut())?;
        }
        Ok(total / self.train.len().max(1) as f64)
    }

    /// Runs `tc.epochs` epochs, validating every `tc.eval_every`. With
    /// `files`, writes the CSV log as it goes and saves the best checkpoint;
    /// a NaN loss aborts with the last saved checkpoint left in place.
    pub fn run(
        mut self,
        val: &[Sample],
        files: Option<&RunFiles>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainOutcome<T>> {
        for s in val {
            check_sample(s, self.cfg)?;
        }
        let mut csv = match files {
            Some(f) => {
                let mut w = BufWriter::new(File::create(&f.log_csv)?);
                writeln!(w, "{LOG_HEADER}")?;
                Some(w)
            }
            None => None,
        };
        let mut best = (self.params.clone(), 0usize, None::<EvalReport>);
        let mut log = Vec::new();
        for epoch in 1..=self.tc.epochs {
            let train_loss = match self.epoch() {
                Ok(l) => l,
                Err(Error::Numerical(msg)) => {
                    if let Some(w) = csv.as_mut() {
                        w.flush()?;
                    }
                    return Err(Error::Numerical(format!(
                        "{msg} at epoch {epoch}; last good checkpoint is from epoch {}",
                        best.1
                    )));
                }
                Err(e) => return Err(e),
            };
            let do_eval = !val.is_empty() && (epoch % self.tc.eval_every == 0 || epoch == self.tc.epochs);
            let report = if do_eval {
                Some(evaluate(&self.params, self.cfg, val, self.threads)?)
            } else {
                None
            };
            let improved = match (&report, &best.2) {
                (Some(r), Some(b)) => r.miou > b.miou,
                (Some(_), None) => true,
                (None, _) => val.is_empty(),
            };
            if improved {
                best = (self.params.clone(), epoch, report);
                if let Some(f) = files {
                    checkpoint::save(&f.checkpoint, self.cfg, &self.params)?;
                }
            }
            let entry = EpochLog {
                epoch,
                train_loss,
                val: report,
            };
            if let Some(w) = csv.as_mut() {
                writeln!(w, "{}", entry.csv_row())?;
                w.flush()?;
            }
            on_epoch(&entry);
            log.push(entry);
        }
        Ok(TrainOutcome {
            best: best.0,
            best_epoch: best.1,
            best_report: best.2,
            last: self.params,
            log,
        })
    }
}
