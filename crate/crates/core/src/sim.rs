//! Synthetic FMCW ADC frames in normalised-frequency units, plus the BEV
//! ground truth derived from the same scene.

use std::f64::consts::TAU;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Azimuth field of view, degrees either side of boresight.
pub const MAX_AZIMUTH_DEG: f64 = 60.0;

/// One point scatterer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    /// Fraction of the maximum unambiguous range, in `[0, 1)`.
    pub range_norm: f64,
    /// Degrees, in `[-60, 60]`.
    pub azimuth: f64,
    /// Cycles per chirp, in `(-0.5, 0.5)`.
    pub doppler_norm: f64,
    pub amplitude: f64,
}

impl Target {
    /// Fast-time normalised beat frequency.
    pub fn mu(&self) -> f64 {
        self.range_norm * 0.5
    }

    /// Phase advance per receiver, in cycles.
    pub fn spatial_freq(&self) -> f64 {
        0.5 * self.azimuth.to_radians().sin()
    }

    fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.range_norm)
            && self.azimuth.abs() <= MAX_AZIMUTH_DEG
            && self.doppler_norm.abs() < 0.5
            && self.amplitude > 0.0
            && self.amplitude.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("target out of range or aliasing: {self:?}")))
        }
    }
}

/// Frame dimensions `(C, S, N_Rx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub chirps: usize,
    pub samples: usize,
    pub n_rx: usize,
}

impl Dims {
    pub fn new(chirps: usize, samples: usize, n_rx: usize) -> Self {
        Self { chirps, samples, n_rx }
    }

    pub fn complex_len(&self) -> usize {
        self.chirps * self.samples * self.n_rx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    targets: Vec<Target>,
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub seed: u64,
    pub dims: Dims,
}

impl Scene {
    pub fn new(targets: Vec<Target>, snr_db: f64, seed: u64, dims: Dims) -> Result<Self> {
        if dims.chirps == 0 || dims.samples == 0 || dims.n_rx == 0 {
            return Err(Error::contract(format!("scene dims must be >= 1, got {dims:?}")));
        }
        if snr_db.is_nan() {
            return Err(Error::contract("snr_db is NaN"));
        }
        targets.iter().try_for_each(Target::validate)?;
        Ok(Self {
            targets,
            snr_db,
            seed,
            dims,
        })
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    /// Draws `min..=max` targets uniformly over the field of view.
    pub fn random(rng: &mut impl Rng, dims: Dims, targets: (usize, usize), snr_db: f64) -> Self {
        let n = rng.random_range(targets.0..=targets.1);
        let targets = (0..n)
            .map(|_| Target {
                range_norm: rng.random_range(0.05..0.95),
                azimuth: rng.random_range(-55.0..55.0),
                doppler_norm: rng.random_range(-0.45..0.45),
                amplitude: rng.random_range(0.5..1.5),
            })
            .collect();
        Self {
            targets,
            snr_db,
            seed: rng.random(),
            dims,
        }
    }

    /// The next frame of a moving scene: every target's range advances by
    /// `range_rate · doppler_norm` (clamped to the field), noise is redrawn.
    pub fn advanced(&self, range_rate: f64, seed: u64) -> Self {
        let targets = self
            .targets
            .iter()
            .map(|t| Target {
                range_norm: (t.range_norm + range_rate * t.doppler_norm).clamp(0.0, 0.999),
                ..*t
            })
            .collect();
        Self {
            targets,
            seed,
            ..self.clone()
        }
    }
}

/// One frame of complex samples, interleaved `(re, im)` in `[c][s][rx]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcFrame {
    pub dims: Dims,
    samples: Vec<f32>,
}

impl AdcFrame {
    pub fn new(dims: Dims, samples: Vec<f32>) -> Result<Self> {
        if samples.len() != 2 * dims.complex_len() {
            return Err(Error::contract(format!(
                "frame {dims:?} needs {} reals, got {}",
                2 * dims.complex_len(),
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite ADC sample".into()));
        }
        Ok(Self { dims, samples })
    }

    pub fn raw(&self) -> &[f32] {
        &self.samples
    }

    pub fn at(&self, c: usize, s: usize, rx: usize) -> Complex<f32> {
        let i = 2 * ((c * self.dims.samples + s) * self.dims.n_rx + rx);
        Complex::new(self.samples[i], self.samples[i + 1])
    }

    /// Interleaved receiver vector of tick `t` (0-based, chirp-major).
    pub fn tick(&self, t: usize) -> &[f32] {
        let w = 2 * self.dims.n_rx;
        &self.samples[t * w..(t + 1) * w]
    }

    pub fn ticks(&self) -> usize {
        self.dims.chirps * self.dims.samples
    }
}

/// Noise-free signal model plus seeded circular Gaussian noise.
pub fn synthesize_frame(scene: &Scene) -> AdcFrame {
    let Dims { chirps, samples, n_rx } = scene.dims;
    let mut out = Vec::with_capacity(2 * scene.dims.complex_len());
    let signal_power: f64 = scene.targets.iter().map(|t| t.amplitude * t.amplitude).sum();
    let noise_var = if scene.targets.is_empty() {
        1.0
    } else if scene.snr_db.is_infinite() && scene.snr_db > 0.0 {
        0.0
    } else {
        signal_power / 10f64.powf(scene.snr_db / 10.0)
    };
    let sigma = (noise_var / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    for c in 0..chirps {
        for s in 0..samples {
            for rx in 0..n_rx {
                let mut v = Complex::new(0.0f64, 0.0);
                for t in &scene.targets {
                    let cycles = t.mu() * s as f64 + t.doppler_norm * c as f64 + t.spatial_freq() * rx as f64;
                    v += Complex::from_polar(t.amplitude, TAU * cycles.fract());
                }
                if sigma > 0.0 {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    v += Complex::new(re, im) * sigma;
                }
                out.push(v.re as f32);
                out.push(v.im as f32);
            }
        }
    }
    AdcFrame {
        dims: scene.dims,
        samples: out,
    }
}

/// Ground truth on an `h×w` range/azimuth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub h: usize,
    pub w: usize,
    /// 1 = free.
    pub seg: Vec<u8>,
    /// Per cell `(objectness, Δrange, Δazimuth)`, row-major.
    pub det: Vec<f32>,
}

impl Labels {
    pub fn objectness(&self, r: usize, a: usize) -> f32 {
        self.det[(r * self.w + a) * 3]
    }

    pub fn offsets(&self, r: usize, a: usize) -> (f32, f32) {
        let i = (r * self.w + a) * 3;
        (self.det[i + 1], self.det[i + 2])
    }
}

/// Continuous grid coordinates `(row, col)` of a target, in cells.
pub fn grid_position(t: &Target, h: usize, w: usize) -> (f64, f64) {
    let row = t.range_norm * h as f64;
    let col = (t.azimuth + MAX_AZIMUTH_DEG) / (2.0 * MAX_AZIMUTH_DEG) * w as f64;
    (row, col.min(w as f64 - 1e-9))
}

/// Shadowed free-space mask plus disk objectness with sub-cell offsets.
pub fn rasterize_labels(scene: &Scene, grid: (usize, usize)) -> Labels {
    let (h, w) = grid;
    let mut seg = vec![1u8; h * w];
    let mut det = vec![0f32; h * w * 3];
    // Squared distance of the target currently owning each positive cell.
    let mut owner = vec![f64::INFINITY; h * w];
    for t in &scene.targets {
        let (tr, tc) = grid_position(t, h, w);
        let (row, col) = (tr.floor() as usize, tc.floor() as usize);
        for r in row..h {
            seg[r * w + col] = 0;
        }
        for dr in -1i64..=1 {
            for da in -1i64..=1 {
                if dr * dr + da * da > 1 {
                    continue;
                }
                let (r, a) = (row as i64 + dr, col as i64 + da);
                if r < 0 || a < 0 || r >= h as i64 || a >= w as i64 {
                    continue;
                }
                let cell = r as usize * w + a as usize;
                let off_r = tr - (r as f64 + 0.5);
                let off_a = tc - (a as f64 + 0.5);
                let d2 = off_r * off_r + off_a * off_a;
                if d2 < owner[cell] {
                    owner[cell] = d2;
                    det[cell * 3] = 1.0;
                    det[cell * 3 + 1] = off_r as f32;
                    det[cell * 3 + 2] = off_a as f32;
                }
            }
        }
    }
    Labels { h, w, seg, det }
}
