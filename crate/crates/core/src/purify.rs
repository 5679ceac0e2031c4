//! End-to-end purification: magnitude-adaptive forward jump followed by a
//! short reverse chain with frequency correction at every step.

use std::sync::Arc;

use crate::attacks::Purifier;
use crate::denoiser::Denoiser;
use crate::diffusion::{self, ReverseConfig};
use crate::error::Result;
use crate::freqpure::{FreqPureConfig, FreqPureTarget, FreqPurifier};
use crate::mani::{self, ManiAnalysis, ManiConfig};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::spectral;
use crate::tensor::{ImageTensor, Tensor};

/// Pixel values in `[0, 1]` to model space `[-1, 1]`.
pub fn to_model_space(x: &Tensor) -> Tensor {
    x.map(|p| 2.0 * p - 1.0)
}

/// Model space back to pixels, without clamping.
pub fn to_pixel_space(x: &Tensor) -> Tensor {
    x.map(|m| (m + 1.0) * 0.5)
}

/// Trace entry for one reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    /// Largest relative low-band magnitude deviation from the adversarial input
    /// of the tensor the frequency correction was applied to (after correction).
    pub low_band_deviation: f64,
}

#[derive(Debug, Clone)]
pub struct PurifyOutput {
    pub image: ImageTensor,
    /// `None` when `t_start = 0`.
    pub analysis: Option<ManiAnalysis>,
    /// Model-space state right after the forward jump.
    pub x_start: Option<Tensor>,
    /// Model-space injected noise `√(1-ᾱ)·ε_t`.
    pub injected_noise: Option<Tensor>,
    pub steps: Vec<StepRecord>,
}

/// Everything needed to purify images repeatedly.
#[derive(Clone)]
pub struct Pipeline {
    pub mani: ManiConfig,
    pub freqpure: FreqPureConfig,
    pub reverse: ReverseConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: Arc<dyn Denoiser>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("mani", &self.mani)
            .field("freqpure", &self.freqpure)
            .field("reverse", &self.reverse)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn validate(&self) -> Result<()> {
        self.mani.validate()?;
        self.freqpure.validate()?;
        self.reverse.validate(self.schedule.len())
    }

    pub fn run(&self, x_adv: &ImageTensor, seed: u64) -> Result<PurifyOutput> {
        purify(
            x_adv,
            &self.mani,
            &self.freqpure,
            &self.reverse,
            &self.schedule,
            self.denoiser.as_ref(),
            seed,
        )
    }
}

impl Purifier for Pipeline {
    fn purify(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let image = ImageTensor::from_clamped(x.clone())?;
        Ok(self.run(&image, seed)?.image.into_tensor())
    }
}

/// Purifies `x_adv`. Identical inputs, configs and seed give bit-identical output.
pub fn purify(
    x_adv: &ImageTensor,
    mani_cfg: &ManiConfig,
    freq_cfg: &FreqPureConfig,
    rev_cfg: &ReverseConfig,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    seed: u64,
) -> Result<PurifyOutput> {
    mani_cfg.validate()?;
    freq_cfg.validate()?;
    rev_cfg.validate(schedule.len())?;
    let (h, w, c) = (x_adv.height(), x_adv.width(), x_adv.channels());
    spectral::ensure_power_of_two(h, w)?;
    if rev_cfg.t_start == 0 {
        return Ok(PurifyOutput {
            image: x_adv.clone(),
            analysis: None,
            x_start: None,
            injected_noise: None,
            steps: Vec::new(),
        });
    }

    let x_m = to_model_space(x_adv.as_tensor());
    let adv = spectral::decompose(&spectral::dft(&x_m)?);
    let analysis = mani::analyze_spectrum(&adv, [h, w, c], mani_cfg)?;
    let corrector = FreqPurifier::new(adv, *freq_cfg)?;

    let mut rng = rng::seeded(seed);
    let eps_g = rng::standard_normal(vec![h, w, c], &mut rng)?;
    let eps_t = mani::modulate_noise(&analysis.map, &eps_g)?;
    let mut x = mani::forward_diffuse(&x_m, rev_cfg.t_start, schedule, &eps_t)?;
    let noise_scale = (1.0 - schedule.alpha_bar(rev_cfg.t_start)?).sqrt() as f32;
    let injected_noise = eps_t.map(|v| v * noise_scale);
    let x_start = x.clone();

    let ts = diffusion::timesteps(rev_cfg.t_start, rev_cfg.n_steps)?;
    let mut steps = Vec::with_capacity(rev_cfg.n_steps);
    for pair in ts.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let coeffs = diffusion::posterior_coeffs(t, t_prev, schedule)?;
        let eps_hat = denoiser.predict_noise(&x, t, schedule)?;
        let x0 = diffusion::predict_x0(&x, &eps_hat, t, schedule, rev_cfg.literal_x0)?;
        // Without the correction every target reduces to the plain reverse step.
        let target = if freq_cfg.enabled {
            freq_cfg.target
        } else {
            FreqPureTarget::PosteriorSample
        };
        let low_band_deviation = match target {
            FreqPureTarget::Literal => {
                x = corrector.step(&x0)?;
                corrector.low_band_deviation(&x)?
            }
            FreqPureTarget::PredictedX0 => {
                let x0 = corrector.step(&x0)?;
                x = diffusion::posterior_sample(&x, &x0, coeffs, &mut rng)?;
                corrector.low_band_deviation(&x0)?
            }
            FreqPureTarget::PosteriorSample => {
                let sample = diffusion::posterior_sample(&x, &x0, coeffs, &mut rng)?;
                x = corrector.step(&sample)?;
                corrector.low_band_deviation(&x)?
            }
        };
        steps.push(StepRecord {
            t,
            t_prev,
            low_band_deviation,
        });
        x.check_finite()?;
    }

    let image = ImageTensor::from_clamped(to_pixel_space(&x))?;
    Ok(PurifyOutput {
        image,
        analysis: Some(analysis),
        x_start: Some(x_start),
        injected_noise: Some(injected_noise),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Covariance, Identity, OracleGaussian};
    use crate::schedule::linear_schedule;
    use rand::Rng;

    fn random_image(seed: u64, side: usize) -> ImageTensor {
        let mut r = rng::seeded(seed);
        let data = (0..side * side * 3).map(|_| r.random::<f32>()).collect();
        ImageTensor::new(Tensor::new(vec![side, side, 3], data).unwrap()).unwrap()
    }

    fn schedule() -> NoiseSchedule {
        linear_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn zero_start_returns_input() {
        let x = random_image(1, 8);
        let rev = ReverseConfig {
            t_start: 0,
            ..Default::default()
        };
        let out = purify(
            &x,
            &ManiConfig::uniform(),
            &FreqPureConfig::disabled(),
            &rev,
            &schedule(),
            &Identity,
            3,
        )
        .unwrap();
        assert_eq!(out.image, x);
        assert!(out.steps.is_empty());
    }

    #[test]
    fn deterministic_for_seed() {
        let x = random_image(2, 16);
        let s = schedule();
        let run = |seed| {
            purify(
                &x,
                &ManiConfig::default(),
                &FreqPureConfig::default(),
                &ReverseConfig::default(),
                &s,
                &Identity,
                seed,
            )
            .unwrap()
        };
        let (a, b, c) = (run(5), run(5), run(6));
        assert_eq!(a.image, b.image);
        assert_ne!(a.image, c.image);
        assert_eq!(a.steps.len(), 5);
        assert_eq!(
            a.steps.iter().map(|r| r.t).collect::<Vec<_>>(),
            vec![100, 80, 60, 40, 20]
        );
        for r in &a.steps {
            assert!(r.low_band_deviation <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn every_target_variant_runs() {
        let x = random_image(3, 16);
        let s = schedule();
        for target in [
            FreqPureTarget::Literal,
            FreqPureTarget::PredictedX0,
            FreqPureTarget::PosteriorSample,
        ] {
            let fp = FreqPureConfig {
                target,
                ..Default::default()
            };
            let out = purify(
                &x,
                &ManiConfig::default(),
                &fp,
                &ReverseConfig::default(),
                &s,
                &Identity,
                1,
            )
            .unwrap();
            assert_eq!(out.steps.len(), 5);
            assert!(out.image.as_tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn non_power_of_two_rejected() {
        let x = ImageTensor::new(Tensor::filled(vec![12, 12, 3], 0.5).unwrap()).unwrap();
        let err = purify(
            &x,
            &ManiConfig::default(),
            &FreqPureConfig::default(),
            &ReverseConfig::default(),
            &schedule(),
            &Identity,
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn uniform_oracle_purification_moves_toward_clean() {
        let s = schedule();
        let mut closer = 0;
        let trials = 200;
        for i in 0..trials {
            let clean = random_image(100 + i, 8);
            let mut r = rng::seeded(500 + i);
            let adv_data: Vec<f32> = clean
                .as_tensor()
                .data()
                .iter()
                .map(|&v| (v + if r.random::<bool>() { 0.1 } else { -0.1 }).clamp(0.0, 1.0))
                .collect();
            let adv = ImageTensor::new(clean.as_tensor().with_data(adv_data).unwrap()).unwrap();
            let oracle = OracleGaussian::from_pixel_stats(clean.as_tensor(), Covariance::Isotropic(1e-3)).unwrap();
            let out = purify(
                &adv,
                &ManiConfig::uniform(),
                &FreqPureConfig::disabled(),
                &ReverseConfig::default(),
                &s,
                &oracle,
                i,
            )
            .unwrap();
            let dist = |a: &Tensor| -> f64 {
                a.data()
                    .iter()
                    .zip(clean.as_tensor().data())
                    .map(|(x, y)| ((x - y) as f64).powi(2))
                    .sum()
            };
            if dist(out.image.as_tensor()) < dist(adv.as_tensor()) {
                closer += 1;
            }
        }
        assert!(closer as f64 >= 0.95 * trials as f64, "{closer}/{trials}");
    }
}
