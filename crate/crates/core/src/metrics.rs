//! Evaluation metrics: SSIM, spectral band distributions and their KL divergence,
//! and accuracy bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{self, BandPartition};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over all valid 11×11 Gaussian-window positions (σ = 1.5), averaged over
/// channels, for images on a `[0, 1]` dynamic range.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.ensure_same_dims(y, "ssim")?;
    let (h, w, c) = x.hwc()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |t: &Tensor| -> Vec<f64> { (0..h * w).map(|p| t.data()[p * c + ch] as f64).collect() };
        let (a, b) = (plane(x), plane(y));
        let mut sum = 0.0;
        for r in 0..oh {
            for s in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, gi) in g.iter().enumerate() {
                    for (j, gj) in g.iter().enumerate() {
                        let wgt = gi * gj;
                        let p = (r + i) * w + s + j;
                        ma += wgt * a[p];
                        mb += wgt * b[p];
                        saa += wgt * a[p] * a[p];
                        sbb += wgt * b[p] * b[p];
                        sab += wgt * a[p] * b[p];
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Smoothing added to every band before normalizing a [`BandDistribution`].
pub const BAND_SMOOTHING: f64 = 1e-12;

/// Probability vector over radial bands derived from band-mean magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct BandDistribution {
    pub p: Vec<f64>,
}

/// `p_i = (M_i + s) / Σ_j (M_j + s)` where `M` are band means of `|dft(noise)|`.
pub fn band_distribution(noise: &Tensor, partition: &BandPartition) -> Result<BandDistribution> {
    if noise.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Numerical(
            "noise is identically zero; its band distribution is undefined".into(),
        ));
    }
    let mp = spectral::decompose(&spectral::dft(noise)?);
    let means = spectral::band_means(&mp, partition)?;
    Ok(normalize_distribution(&means, BAND_SMOOTHING))
}

fn normalize_distribution(weights: &[f64], smoothing: f64) -> BandDistribution {
    let total: f64 = weights.iter().map(|m| m + smoothing).sum();
    BandDistribution {
        p: weights.iter().map(|m| (m + smoothing) / total).collect(),
    }
}

/// Pixel-value histogram of a noise field over `bins` equal bins on `[-range, range]`
/// (values outside are counted in the edge bins), with additive smoothing.
pub fn pixel_histogram(noise: &Tensor, bins: usize, range: f64) -> Result<BandDistribution> {
    if bins == 0 || !(range > 0.0) {
        return Err(Error::config("histogram needs bins >= 1 and range > 0"));
    }
    let mut counts = vec![0.0; bins];
    for &v in noise.data() {
        let f = ((v as f64 + range) / (2.0 * range) * bins as f64).floor();
        let idx = (f.max(0.0) as usize).min(bins - 1);
        counts[idx] += 1.0;
    }
    Ok(normalize_distribution(&counts, 1e-6))
}

/// How a noise field is reduced to a distribution before comparing with KL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KlEstimator {
    /// Radial band means of the spectrum magnitude.
    BandMagnitude,
    /// Histogram of pixel values on `[-range, range]`.
    PixelHistogram { bins: usize, range: f64 },
}

impl KlEstimator {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::BandMagnitude => Ok(()),
            Self::PixelHistogram { bins, range } => {
                if bins == 0 || !(range > 0.0 && range.is_finite()) {
                    Err(Error::config("pixel_histogram needs bins >= 1 and a positive range"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn distribution(&self, noise: &Tensor, partition: &BandPartition) -> Result<BandDistribution> {
        match *self {
            Self::BandMagnitude => band_distribution(noise, partition),
            Self::PixelHistogram { bins, range } => pixel_histogram(noise, bins, range),
        }
    }
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)`.
pub fn kl_divergence(p: &BandDistribution, q: &BandDistribution) -> Result<f64> {
    if p.p.len() != q.p.len() {
        return Err(Error::shape(format!(
            "distributions have {} and {} entries",
            p.p.len(),
            q.p.len()
        )));
    }
    Ok(p.p
        .iter()
        .zip(&q.p)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Fraction of predictions equal to the truth.
pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::config("accuracy of an empty prediction set"));
    }
    if preds.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    let correct = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub defense: String,
    pub attack: String,
    pub norm: String,
    pub epsilon: f64,
    pub standard_acc: f64,
    pub robust_acc: f64,
    pub mean_ssim: Option<f64>,
    pub kl_adaptive: Option<f64>,
    pub kl_uniform: Option<f64>,
}

/// Renders report rows as CSV with the header
/// `run_id,defense,attack,norm,epsilon,standard_acc,robust_acc,mean_ssim,kl_adaptive,kl_uniform`.
pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
