//! Magnitude-adaptive noise injection.
//!
//! The adversarial input's magnitude spectrum is summarized per radial band,
//! each band gets weight `w_i = 1/(M_i^γ + ε₀)`, and the resulting weight field
//! shapes the Gaussian noise used for the closed-form forward jump
//! `x_t = √ᾱ_t·x + √(1-ᾱ_t)·ε_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{kl_divergence, KlEstimator};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::spectral::{self, BandPartition, Spectrum};
use crate::tensor::Tensor;

/// How band weights become a noise-shaping operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// Inverse-transform the radial weight field into a pixel-wise intensity map `W`
    /// and use `ε_t = W ⊙ ε_G`.
    SpatialIdft,
    /// Filter white noise by the weight field in the frequency domain, so band `i`
    /// carries noise with standard deviation proportional to `w_i`.
    FrequencyShaping,
}

/// How the (real, even) inverse transform of the weight field is folded into a
/// nonnegative spatial map in [`MapMode::SpatialIdft`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialFold {
    Abs,
    /// Real part with negative lobes clipped to zero.
    RealPart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManiConfig {
    pub gamma: f64,
    pub n_bands: usize,
    pub eps0: f64,
    pub map_mode: MapMode,
    pub spatial_fold: SpatialFold,
}

impl Default for ManiConfig {
    fn default() -> Self {
        Self {
            gamma: 1.8,
            n_bands: 8,
            eps0: 1e-8,
            map_mode: MapMode::FrequencyShaping,
            spatial_fold: SpatialFold::Abs,
        }
    }
}

impl ManiConfig {
    /// Uniform-noise configuration (`γ = 0`), the plain DDPM forward process.
    pub fn uniform() -> Self {
        Self {
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("mani.gamma must be >= 0, got {}", self.gamma)));
        }
        if self.n_bands == 0 {
            return Err(Error::config("mani.n_bands must be >= 1"));
        }
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::config(format!("mani.eps0 must be > 0, got {}", self.eps0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandWeights(pub Vec<f64>);

impl BandWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn is_near_constant(&self) -> bool {
        let (lo, hi) = self
            .0
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &w| (lo.min(w), hi.max(w)));
        hi / lo < 1.0 + 1e-9
    }
}

/// `w_i = 1 / (M_i^γ + ε₀)`.
pub fn band_weights(means: &[f64], gamma: f64, eps0: f64) -> Result<BandWeights> {
    if means.is_empty() {
        return Err(Error::config("no band means"));
    }
    if let Some(m) = means.iter().find(|m| !(**m >= 0.0)) {
        return Err(Error::Numerical(format!("band mean {m} is negative")));
    }
    let weights: Vec<f64> = means.iter().map(|&m| 1.0 / (m.powf(gamma) + eps0)).collect();
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::Numerical(format!(
            "band weights are not finite and positive: {weights:?}"
        )));
    }
    Ok(BandWeights(weights))
}

/// Noise-shaping operator derived from band weights, normalized so the mean of
/// its squared entries is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub mode: MapMode,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `SpatialIdft`: `H×W×C` spatial map (interleaved like [`Tensor`]).
    /// `FrequencyShaping`: `H×W` frequency field (unshifted), shared by all channels.
    pub values: Vec<f64>,
    /// Set when all band weights coincide; the map is then identically 1.
    pub uniform: bool,
}

impl WeightMap {
    /// The map as a tensor: `[H, W, C]` for spatial maps, `[H, W, 1]` for frequency fields.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let c = match self.mode {
            MapMode::SpatialIdft => self.channels,
            MapMode::FrequencyShaping => 1,
        };
        Tensor::from_f64(vec![self.height, self.width, c], &self.values)
    }

    pub fn mean_square(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }
}

fn normalize_mean_square(values: &mut [f64]) -> Result<()> {
    let ms = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    if !(ms > 0.0) || !ms.is_finite() {
        return Err(Error::Numerical(
            "weight map is identically zero and cannot be normalized".into(),
        ));
    }
    let scale = 1.0 / ms.sqrt();
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(())
}

/// The radial field `F(u, v) = w_{band(u, v)}` over an `H×W` spectrum.
pub fn weight_field(weights: &BandWeights, partition: &BandPartition) -> Result<Vec<f64>> {
    if weights.0.len() != partition.n_bands {
        return Err(Error::shape(format!(
            "{} weights for {} bands",
            weights.0.len(),
            partition.n_bands
        )));
    }
    Ok(partition.assignment.iter().map(|&b| weights.0[b]).collect())
}

pub fn weight_map(
    weights: &BandWeights,
    partition: &BandPartition,
    dims: [usize; 3],
    mode: MapMode,
    fold: SpatialFold,
) -> Result<WeightMap> {
    let [h, w, c] = dims;
    if partition.height != h || partition.width != w {
        return Err(Error::shape(format!(
            "partition {}x{} does not match image {h}x{w}",
            partition.height, partition.width
        )));
    }
    let len = match mode {
        MapMode::SpatialIdft => h * w * c,
        MapMode::FrequencyShaping => h * w,
    };
    if weights.is_near_constant() {
        return Ok(WeightMap {
            mode,
            height: h,
            width: w,
            channels: c,
            values: vec![1.0; len],
            uniform: true,
        });
    }
    let field = weight_field(weights, partition)?;
    let mut values = match mode {
        MapMode::FrequencyShaping => field,
        MapMode::SpatialIdft => {
            let coeffs = field.iter().map(|&f| num_complex::Complex64::new(f, 0.0)).collect();
            let (plane, _) = spectral::idft_real(&Spectrum::new(h, w, 1, coeffs)?)?;
            let mut out = Vec::with_capacity(h * w * c);
            for v in plane {
                let folded = match fold {
                    SpatialFold::Abs => v.abs(),
                    SpatialFold::RealPart => v.max(0.0),
                };
                out.extend(std::iter::repeat_n(folded, c));
            }
            out
        }
    };
    normalize_mean_square(&mut values)?;
    Ok(WeightMap {
        mode,
        height: h,
        width: w,
        channels: c,
        values,
        uniform: false,
    })
}

/// Shapes standard Gaussian noise `ε_G` with the weight map.
///
/// Spatial maps multiply elementwise; frequency fields filter the spectrum of `ε_G`.
/// A uniform map returns `ε_G` unchanged.
pub fn modulate_noise(map: &WeightMap, noise: &Tensor) -> Result<Tensor> {
    let (h, w, c) = noise.hwc()?;
    if (h, w, c) != (map.height, map.width, map.channels) {
        return Err(Error::shape(format!(
            "noise {h}x{w}x{c} vs weight map {}x{}x{}",
            map.height, map.width, map.channels
        )));
    }
    if map.uniform {
        return Ok(noise.clone());
    }
    match map.mode {
        MapMode::SpatialIdft => {
            let data = noise
                .data()
                .iter()
                .zip(&map.values)
                .map(|(&e, &wv)| (e as f64 * wv) as f32)
                .collect();
            noise.with_data(data)
        }
        MapMode::FrequencyShaping => {
            let mut spec = spectral::dft(noise)?;
            let plane = h * w;
            for (i, z) in spec.coeffs_mut().iter_mut().enumerate() {
                *z *= map.values[i % plane];
            }
            spectral::idft(&spec)
        }
    }
}

/// Everything MANI derives from the adversarial input.
#[derive(Debug, Clone)]
pub struct ManiAnalysis {
    pub partition: BandPartition,
    pub band_means: Vec<f64>,
    pub weights: BandWeights,
    pub map: WeightMap,
}

pub fn analyze(x_adv: &Tensor, cfg: &ManiConfig) -> Result<ManiAnalysis> {
    cfg.validate()?;
    let (h, w, c) = x_adv.hwc()?;
    let mp = spectral::decompose(&spectral::dft(x_adv)?);
    analyze_spectrum(&mp, [h, w, c], cfg)
}

/// [`analyze`] from an already decomposed spectrum of the adversarial input.
pub fn analyze_spectrum(adv: &spectral::MagPhase, dims: [usize; 3], cfg: &ManiConfig) -> Result<ManiAnalysis> {
    cfg.validate()?;
    let partition = spectral::make_band_partition(dims[0], dims[1], cfg.n_bands)?;
    let band_means = spectral::band_means(adv, &partition)?;
    let weights = band_weights(&band_means, cfg.gamma, cfg.eps0)?;
    let map = weight_map(&weights, &partition, dims, cfg.map_mode, cfg.spatial_fold)?;
    Ok(ManiAnalysis {
        partition,
        band_means,
        weights,
        map,
    })
}

/// Closed-form jump `x_t = √ᾱ_t·x + √(1-ᾱ_t)·ε_t`.
pub fn forward_diffuse(x: &Tensor, t_star: usize, schedule: &NoiseSchedule, eps_t: &Tensor) -> Result<Tensor> {
    x.ensure_same_dims(eps_t, "forward_diffuse")?;
    let ab = schedule.alpha_bar(t_star)?;
    if t_star == 0 {
        return Err(Error::config("forward jump target must be >= 1"));
    }
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x
        .data()
        .iter()
        .zip(eps_t.data())
        .map(|(&xv, &e)| (sa * xv as f64 + sn * e as f64) as f32)
        .collect();
    x.with_data(data)
}

/// Comparison of injected noise against the adversarial perturbation.
#[derive(Debug, Clone)]
pub struct NoiseKlReport {
    /// `KL(p_adv ‖ p_injected)` for magnitude-adaptive noise.
    pub kl_adaptive: f64,
    /// The same for unshaped Gaussian noise from the same draw.
    pub kl_uniform: f64,
    /// `D = N_inj - N_adv` for the adaptive noise.
    pub heatmap: Tensor,
}

/// Compares adaptive and uniform injected noise with the adversarial noise
/// `N_adv = 2·(x_adv - x_clean)` (pixel differences on the `[-1, 1]` scale).
/// Injected noise is `√(1-ᾱ_{t*})·ε`, with `ε_G` drawn from `seed`.
pub fn noise_kl_report(
    x_adv: &Tensor,
    x_clean: &Tensor,
    cfg: &ManiConfig,
    schedule: &NoiseSchedule,
    t_star: usize,
    estimator: KlEstimator,
    seed: u64,
) -> Result<NoiseKlReport> {
    x_adv.ensure_same_dims(x_clean, "noise_kl_report")?;
    let (h, w, c) = x_adv.hwc()?;
    let analysis = analyze(&x_adv.map(|p| 2.0 * p - 1.0), cfg)?;
    let adv_noise = x_adv.with_data(
        x_adv
            .data()
            .iter()
            .zip(x_clean.data())
            .map(|(a, b)| 2.0 * (a - b))
            .collect(),
    )?;
    let eps_g = rng::standard_normal(vec![h, w, c], &mut rng::seeded(seed))?;
    let eps_t = modulate_noise(&analysis.map, &eps_g)?;
    let scale = (1.0 - schedule.alpha_bar(t_star)?).sqrt() as f32;
    let injected_adaptive = eps_t.map(|v| v * scale);
    let injected_uniform = eps_g.map(|v| v * scale);

    let partition = &analysis.partition;
    let p_adv = estimator.distribution(&adv_noise, partition)?;
    let kl_adaptive = kl_divergence(&p_adv, &estimator.distribution(&injected_adaptive, partition)?)?;
    let kl_uniform = kl_divergence(&p_adv, &estimator.distribution(&injected_uniform, partition)?)?;

    let heatmap = injected_adaptive.with_data(
        injected_adaptive
            .data()
            .iter()
            .zip(adv_noise.data())
            .map(|(i, a)| i - a)
            .collect(),
    )?;
    Ok(NoiseKlReport {
        kl_adaptive,
        kl_uniform,
        heatmap,
    })
}
