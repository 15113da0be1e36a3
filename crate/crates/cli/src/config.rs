//! Flat `section.key = value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use ssmradnet::model::config::CONFIG_KEYS;
use ssmradnet::model::ModelConfig;
use ssmradnet::train::trainer::TRAIN_KEYS;
use ssmradnet::train::TrainConfig;
use ssmradnet::Error;

type Result<T> = std::result::Result<T, Error>;

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("{key}: cannot parse '{value}'"))
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| bad(key, value))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub min_targets: usize,
    pub max_targets: usize,
    /// `inf` disables noise.
    pub snr_db: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            min_targets: 1,
            max_targets: 4,
            snr_db: 10.0,
        }
    }
}

const SIM_KEYS: &[&str] = &["seed", "min_targets", "max_targets", "snr_db"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    None,
    Batch,
    Streaming,
    Both,
}

impl FromStr for BenchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => BenchMode::None,
            "batch" => BenchMode::Batch,
            "streaming" => BenchMode::Streaming,
            "both" => BenchMode::Both,
            _ => {
                return Err(Error::Config(format!(
                    "bench.mode: expected none/batch/streaming/both, got '{s}'"
                )))
            }
        })
    }
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchMode::None => "none",
            BenchMode::Batch => "batch",
            BenchMode::Streaming => "streaming",
            BenchMode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Timed frames per mode, after the fixed warmup.
    pub frames: usize,
    pub mode: BenchMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            mode: BenchMode::Both,
        }
    }
}

const BENCH_KEYS: &[&str] = &["frames", "mode"];

/// Preset names accepted by `model.preset`.
const PRESETS: &[&str] = &["radial", "radical", "synthetic"];

/// Defaults: the RADIal model, the stock training schedule, 1–4 targets at
/// 10 dB, 100 timed frames in both latency modes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "radial".into(),
            model: ModelConfig::radial(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn preset(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "radial" => ModelConfig::radial(),
        "radical" => ModelConfig::radical(),
        "synthetic" => ModelConfig::synthetic(),
        _ => {
            return Err(Error::Config(format!(
                "model.preset: expected one of {PRESETS:?}, got '{name}'"
            )))
        }
    })
}

fn split(line: &str) -> Result<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("malformed line '{line}', expected section.key = value")))?;
    Ok((k.trim(), v.trim()))
}

fn strip(line: &str) -> &str {
    line.split_once('#').map_or(line, |(a, _)| a).trim()
}

impl RunConfig {
    /// Applies file lines, then overrides. `model.preset` is resolved first
    /// wherever it appears so individual model keys always win over it.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines().map(strip).filter(|l| !l.is_empty()) {
            pairs.push(split(line)?);
        }
        for o in overrides {
            pairs.push(split(o)?);
        }
        let mut cfg = Self::default();
        if let Some(&(_, name)) = pairs.iter().rev().find(|(k, _)| *k == "model.preset") {
            cfg.model = preset(name)?;
            cfg.preset = name.to_string();
        }
        for (k, v) in pairs {
            if k != "model.preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key '{key}' has no section")))?;
        match section {
            "model" => self.model.set(field, value),
            "train" => self.train.set(field, value),
            "sim" => {
                let s = &mut self.sim;
                match field {
                    "seed" => s.seed = parse(key, value)?,
                    "min_targets" => s.min_targets = parse(key, value)?,
                    "max_targets" => s.max_targets = parse(key, value)?,
                    "snr_db" => s.snr_db = parse(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }
            "bench" => {
                match field {
                    "frames" => self.bench.frames = parse(key, value)?,
                    "mode" => self.bench.mode = value.parse()?,
                    _ => return Err(Error::Config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }
            _ => Err(Error::Config(format!("unknown section in key '{key}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.sim.min_targets > self.sim.max_targets {
            return Err(Error::Config("sim.min_targets exceeds sim.max_targets".into()));
        }
        if self.sim.snr_db.is_nan() {
            return Err(Error::Config("sim.snr_db is NaN".into()));
        }
        if self.bench.frames == 0 {
            return Err(Error::Config("bench.frames must be >= 1".into()));
        }
        Ok(())
    }

    /// Every effective key; feeding this back through [`RunConfig::parse`]
    /// reproduces the config.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model.preset = {}", self.preset);
        for k in CONFIG_KEYS {
            let _ = writeln!(out, "model.{k} = {}", self.model.get(k).expect("known key"));
        }
        for k in TRAIN_KEYS {
            let _ = writeln!(out, "train.{k} = {}", self.train.get(k).expect("known key"));
        }
        let s = &self.sim;
        for (k, v) in SIM_KEYS.iter().zip([
            s.seed.to_string(),
            s.min_targets.to_string(),
            s.max_targets.to_string(),
            s.snr_db.to_string(),
        ]) {
            let _ = writeln!(out, "sim.{k} = {v}");
        }
        for (k, v) in BENCH_KEYS
            .iter()
            .zip([self.bench.frames.to_string(), self.bench.mode.to_string()])
        {
            let _ = writeln!(out, "bench.{k} = {v}");
        }
        out
    }
}
