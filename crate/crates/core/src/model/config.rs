use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Upsample;

/// How the per-step sample-SSM outputs of one chirp become a chirp token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    FinalState,
    AvgPool,
    /// Causal width-3 depthwise conv over the steps, then the mean.
    Conv1d,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::FinalState => "final_state",
            Aggregation::AvgPool => "avg_pool",
            Aggregation::Conv1d => "conv1d",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_state" => Ok(Aggregation::FinalState),
            "avg_pool" => Ok(Aggregation::AvgPool),
            "conv1d" => Ok(Aggregation::Conv1d),
            _ => Err(Error::config(format!("unknown chirp_aggregation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub segmentation: bool,
    pub detection: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads {
        segmentation: true,
        detection: true,
    };
    pub const SEGMENTATION: Heads = Heads {
        segmentation: true,
        detection: false,
    };
}

impl fmt::Display for Heads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.segmentation {
            parts.push("segmentation");
        }
        if self.detection {
            parts.push("detection");
        }
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Heads {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut h = Heads {
            segmentation: false,
            detection: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "segmentation" => h.segmentation = true,
                "detection" => h.detection = true,
                _ => return Err(Error::config(format!("unknown head '{part}'"))),
            }
        }
        Ok(h)
    }
}

fn upsample_name(u: Upsample) -> &'static str {
    match u {
        Upsample::Nearest => "nearest",
        Upsample::Bilinear => "bilinear",
    }
}

/// Architecture hyperparameters. Frame dims are part of the config because
/// the chirp/frame boundaries are fixed by them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_rx: usize,
    pub s_per_chirp: usize,
    pub chirps_per_frame: usize,
    pub d_conv: usize,
    pub d_state: usize,
    pub chirp_d_state: usize,
    pub chirp_aggregation: Aggregation,
    pub slow_time_expand: bool,
    pub h0: usize,
    pub w0: usize,
    pub c_dec: usize,
    pub upsample: Upsample,
    pub heads: Heads,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::radial()
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "n_rx",
    "s_per_chirp",
    "chirps_per_frame",
    "d_conv",
    "d_state",
    "chirp_d_state",
    "chirp_aggregation",
    "slow_time_expand",
    "h0",
    "w0",
    "c_dec",
    "upsample",
    "heads",
    "seed",
];

impl ModelConfig {
    /// (C, S, N_Rx) = (256, 512, 16); decoder sized for a 256×224 BEV grid.
    pub fn radial() -> Self {
        Self {
            n_rx: 16,
            s_per_chirp: 512,
            chirps_per_frame: 256,
            d_conv: 4,
            d_state: 32,
            chirp_d_state: 32,
            chirp_aggregation: Aggregation::AvgPool,
            slow_time_expand: true,
            h0: 64,
            w0: 56,
            c_dec: 16,
            upsample: Upsample::Nearest,
            heads: Heads::BOTH,
            seed: 0,
        }
    }

    /// (C, S, N_Rx) = (64, 192, 8) with a 64×64 grid.
    pub fn radical() -> Self {
        Self {
            n_rx: 8,
            s_per_chirp: 192,
            chirps_per_frame: 64,
            h0: 16,
            w0: 16,
            ..Self::radial()
        }
    }

    /// Desk-scale config used for synthetic training (32 chirps × 128
    /// samples × 8 receivers, 32×32 grid).
    pub fn synthetic() -> Self {
        Self {
            n_rx: 8,
            s_per_chirp: 128,
            chirps_per_frame: 32,
            d_state: 16,
            chirp_d_state: 16,
            h0: 8,
            w0: 8,
            c_dec: 8,
            heads: Heads::SEGMENTATION,
            ..Self::radial()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_rx", self.n_rx),
            ("s_per_chirp", self.s_per_chirp),
            ("chirps_per_frame", self.chirps_per_frame),
            ("d_conv", self.d_conv),
            ("d_state", self.d_state),
            ("chirp_d_state", self.chirp_d_state),
            ("c_dec", self.c_dec),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{k} must be >= 1")));
            }
        }
        if self.h0 * self.w0 < 16 {
            return Err(Error::config(format!(
                "h0·w0 must be >= 16, got {}·{}",
                self.h0, self.w0
            )));
        }
        if !self.heads.segmentation && !self.heads.detection {
            return Err(Error::config("at least one head is required"));
        }
        Ok(())
    }

    /// Width of chirp tokens and of the chirp-SSM.
    pub fn token_width(&self) -> usize {
        if self.slow_time_expand {
            2 * self.n_rx
        } else {
            self.n_rx
        }
    }

    pub fn ticks_per_frame(&self) -> usize {
        self.chirps_per_frame * self.s_per_chirp
    }

    /// Output BEV grid `(rows, cols)` after two 2× stages.
    pub fn output_grid(&self) -> (usize, usize) {
        (4 * self.h0, 4 * self.w0)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "n_rx" => self.n_rx.to_string(),
            "s_per_chirp" => self.s_per_chirp.to_string(),
            "chirps_per_frame" => self.chirps_per_frame.to_string(),
            "d_conv" => self.d_conv.to_string(),
            "d_state" => self.d_state.to_string(),
            "chirp_d_state" => self.chirp_d_state.to_string(),
            "chirp_aggregation" => self.chirp_aggregation.to_string(),
            "slow_time_expand" => self.slow_time_expand.to_string(),
            "h0" => self.h0.to_string(),
            "w0" => self.w0.to_string(),
            "c_dec" => self.c_dec.to_string(),
            "upsample" => upsample_name(self.upsample).to_string(),
            "heads" => self.heads.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its text form; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::config(format!("{key}: expected an integer, got '{value}'")))
        };
        match key {
            "n_rx" => self.n_rx = int()?,
            "s_per_chirp" => self.s_per_chirp = int()?,
            "chirps_per_frame" => self.chirps_per_frame = int()?,
            "d_conv" => self.d_conv = int()?,
            "d_state" => self.d_state = int()?,
            "chirp_d_state" => self.chirp_d_state = int()?,
            "chirp_aggregation" => self.chirp_aggregation = value.parse()?,
            "slow_time_expand" => {
                self.slow_time_expand = value
                    .parse()
                    .map_err(|_| Error::config(format!("slow_time_expand: expected true/false, got '{value}'")))?
            }
            "h0" => self.h0 = int()?,
            "w0" => self.w0 = int()?,
            "c_dec" => self.c_dec = int()?,
            "upsample" => {
                self.upsample = match value {
                    "nearest" => Upsample::Nearest,
                    "bilinear" => Upsample::Bilinear,
                    _ => return Err(Error::config(format!("unknown upsample '{value}'"))),
                }
            }
            "heads" => self.heads = value.parse()?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::config(format!("seed: expected an integer, got '{value}'")))?
            }
            _ => return Err(Error::config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    /// `key=value` lines in [`CONFIG_KEYS`] order.
    pub fn to_kv(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Parses `key=value` lines on top of the RADIal defaults. Every key must
    /// be present.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed config line '{line}'")))?;
            cfg.set(k.trim(), v)?;
            seen.push(k.trim().to_string());
        }
        if let Some(missing) = CONFIG_KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(Error::config(format!("config blob is missing '{missing}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys whose values differ, formatted `key: self != other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        CONFIG_KEYS
            .iter()
            .filter_map(|k| {
                let (a, b) = (self.get(k)?, other.get(k)?);
                (a != b).then(|| format!("{k}: {a} != {b}"))
            })
            .collect()
    }
}
