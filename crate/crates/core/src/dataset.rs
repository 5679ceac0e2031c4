//! Synthetic oriented-grating dataset.
//!
//! Class `k` is a sinusoidal grating at orientation `kπ/K` with a class-specific
//! spatial frequency placed in the upper half of the radial spectrum. Each image
//! adds a random low-frequency background and white Gaussian texture noise, then
//! clamps to `[0, 1]`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::{self, Spectrum};
use crate::tensor::{ImageTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub n_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Grating amplitude in pixel units.
    pub amplitude: f64,
    /// Standard deviation of the white texture noise.
    pub texture_sigma: f64,
    /// Standard deviation of the background field.
    pub background_sigma: f64,
    /// The background is white inside normalized radius `background_cutoff` and
    /// empty outside it.
    pub background_cutoff: f64,
    /// Lowest and highest class frequency as a fraction of the image side.
    pub freq_lo: f64,
    pub freq_hi: f64,
    /// Draw each grating's phase uniformly instead of fixing it at zero.
    pub random_phase: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            n_per_class: 200,
            height: 32,
            width: 32,
            channels: 3,
            amplitude: 0.055,
            texture_sigma: 0.05,
            background_sigma: 0.1,
            background_cutoff: 0.25,
            freq_lo: 0.375,
            freq_hi: 0.46875,
            random_phase: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!(
                "dataset.classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::config("dataset.n_per_class must be >= 1"));
        }
        spectral::ensure_power_of_two(self.height, self.width)?;
        if self.height.min(self.width) < ImageTensor::MIN_SIDE {
            return Err(Error::config(format!(
                "dataset images must be at least {0}x{0}",
                ImageTensor::MIN_SIDE
            )));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::config(format!(
                "dataset.channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("texture_sigma", self.texture_sigma),
            ("background_sigma", self.background_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "dataset.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.background_cutoff > 0.0 && self.background_cutoff <= 1.0) {
            return Err(Error::config(format!(
                "dataset.background_cutoff must be in (0, 1], got {}",
                self.background_cutoff
            )));
        }
        if !(0.0 < self.freq_lo && self.freq_lo <= self.freq_hi && self.freq_hi < 0.5) {
            return Err(Error::config(format!(
                "dataset frequencies must satisfy 0 < freq_lo <= freq_hi < 0.5, got {} and {}",
                self.freq_lo, self.freq_hi
            )));
        }
        Ok(())
    }

    /// Integer wave vector `(u, v)` (cycles per image along rows and columns) for class `k`.
    pub fn wave_vector(&self, k: usize) -> (i64, i64) {
        let theta = k as f64 * PI / self.classes as f64;
        let frac = if self.classes == 1 {
            self.freq_lo
        } else {
            self.freq_lo + (self.freq_hi - self.freq_lo) * k as f64 / (self.classes - 1) as f64
        };
        let side = self.height.min(self.width) as f64;
        let radius = frac * side;
        (
            (radius * theta.sin()).round() as i64,
            (radius * theta.cos()).round() as i64,
        )
    }
}

/// Index-parity split: within each class, every fifth image (`i % 5 == 4`) is held out.
pub fn is_test_index(index_in_class: usize) -> bool {
    index_in_class % 5 == 4
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: usize,
    pub test: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    /// Interleaved by class: sample `j` has label `j % K`.
    pub samples: Vec<Sample>,
}

impl Dataset {
    fn split(&self, test: bool) -> (Vec<Tensor>, Vec<usize>) {
        self.samples
            .iter()
            .filter(|s| s.test == test)
            .map(|s| (s.image.as_tensor().clone(), s.label))
            .unzip()
    }

    pub fn train_split(&self) -> (Vec<Tensor>, Vec<usize>) {
        self.split(false)
    }

    pub fn test_split(&self) -> (Vec<Tensor>, Vec<usize>) {
        self.split(true)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn background(cfg: &DatasetConfig, r: &mut rng::Rng) -> Result<Vec<f64>> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    if cfg.background_sigma == 0.0 {
        return Ok(vec![0.0; h * w * c]);
    }
    // One field shared by all channels, so the background looks like luminance.
    let white = rng::standard_normal(vec![h, w, 1], r)?;
    let spec = spectral::dft(&white)?;
    let coeffs: Vec<Complex64> = spec
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let (u, v) = (i / w, i % w);
            let keep = (u, v) != (0, 0) && spectral::normalized_radius(u, v, h, w) < cfg.background_cutoff;
            if keep {
                *z
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let (field, _) = spectral::idft_real(&Spectrum::new(h, w, 1, coeffs)?)?;
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    let scale = if rms > 0.0 { cfg.background_sigma / rms } else { 0.0 };
    Ok(field.iter().flat_map(|v| std::iter::repeat_n(v * scale, c)).collect())
}

/// Generates one image of class `label` from its own seed.
pub fn generate_image(cfg: &DatasetConfig, label: usize, seed: u64) -> Result<ImageTensor> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut r = rng::seeded(seed);
    let (ku, kv) = cfg.wave_vector(label);
    let phase = if cfg.random_phase {
        r.random_range(0.0..2.0 * PI)
    } else {
        0.0
    };
    let background = background(cfg, &mut r)?;
    let texture = rng::standard_normal_vec(h * w * c, &mut r);
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let arg = 2.0 * PI * (ku as f64 * i as f64 / h as f64 + kv as f64 * j as f64 / w as f64) + phase;
            let grating = cfg.amplitude * arg.cos();
            for ch in 0..c {
                let idx = (i * w + j) * c + ch;
                let v = 0.5 + grating + background[idx] + cfg.texture_sigma * texture[idx];
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(Tensor::new(vec![h, w, c], data)?)
}

/// Class-balanced, deterministic dataset of `K · n_per_class` images.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let k = cfg.classes;
    let mut samples = Vec::with_capacity(k * cfg.n_per_class);
    for j in 0..k * cfg.n_per_class {
        let (label, index) = (j % k, j / k);
        let image = generate_image(cfg, label, rng::derive_seed(seed, &[label as u64, index as u64]))?;
        samples.push(Sample {
            image,
            label,
            test: is_test_index(index),
        });
    }
    Ok(Dataset {
        config: *cfg,
        seed,
        samples,
    })
}
