//! Reverse sampling over a strided timestep sequence.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReverseConfig {
    /// Forward jump target; 0 disables purification.
    pub t_start: usize,
    pub n_steps: usize,
    /// Divide by `√α_t` instead of `√ᾱ_t` when estimating `x_0`.
    pub literal_x0: bool,
}

impl Default for ReverseConfig {
    fn default() -> Self {
        Self {
            t_start: 100,
            n_steps: 5,
            literal_x0: false,
        }
    }
}

impl ReverseConfig {
    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        if self.t_start > schedule_len {
            return Err(Error::config(format!(
                "reverse.t_start {} exceeds the schedule length {schedule_len}",
                self.t_start
            )));
        }
        if self.t_start > 0 && !(1..=self.t_start).contains(&self.n_steps) {
            return Err(Error::config(format!(
                "reverse.n_steps must lie in 1..={}, got {}",
                self.t_start, self.n_steps
            )));
        }
        Ok(())
    }
}

/// Boundaries `t_start = τ_0 > τ_1 > ... > τ_n = 0`, evenly spaced with rounding.
pub fn timesteps(t_start: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_start {
        return Err(Error::config(format!(
            "need 1 <= n_steps <= t_start, got n_steps={n_steps}, t_start={t_start}"
        )));
    }
    Ok((0..=n_steps)
        .map(|k| (t_start * (n_steps - k) + n_steps / 2) / n_steps)
        .collect())
}

/// `x̂_0 = (x_t - √(1-ᾱ_t)·ε̂) / √ᾱ_t`, or `/ √α_t` when `literal` is set.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, schedule: &NoiseSchedule, literal: bool) -> Result<Tensor> {
    x_t.ensure_same_dims(eps_hat, "predict_x0")?;
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::config("predict_x0 needs t >= 1"));
    }
    let denom = if literal { schedule.alpha(t)? } else { ab }.sqrt();
    let sn = (1.0 - ab).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| ((x as f64 - sn * e as f64) / denom) as f32)
        .collect();
    x_t.with_data(data)
}

/// Coefficients of the strided posterior `q(x_{t'} | x_t, x_0)`:
/// mean `c0·x_0 + ct·x_t` and standard deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub c0: f64,
    pub ct: f64,
    pub sigma: f64,
}

pub fn posterior_coeffs(t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<PosteriorCoeffs> {
    if t_prev >= t {
        return Err(Error::config(format!(
            "reverse step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = if t_prev == 0 {
        0.0
    } else {
        ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt()
    };
    Ok(PosteriorCoeffs { c0, ct, sigma })
}

/// Draws `x_{t'} = c0·x̂_0 + ct·x_t + σ·z`.
pub fn posterior_sample(x_t: &Tensor, x0: &Tensor, coeffs: PosteriorCoeffs, rng: &mut Rng) -> Result<Tensor> {
    x_t.ensure_same_dims(x0, "posterior_sample")?;
    let z = if coeffs.sigma > 0.0 {
        rng::standard_normal_vec(x_t.len(), rng)
    } else {
        vec![0.0; x_t.len()]
    };
    let data = x_t
        .data()
        .iter()
        .zip(x0.data())
        .zip(&z)
        .map(|((&xt, &x0), &z)| (coeffs.c0 * x0 as f64 + coeffs.ct * xt as f64 + coeffs.sigma * z) as f32)
        .collect();
    x_t.with_data(data)
}

/// One ancestral step from `t` to `t_prev` using the denoiser's noise estimate.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let coeffs = posterior_coeffs(t, t_prev, schedule)?;
    let eps_hat = denoiser.predict_noise(x_t, t, schedule)?;
    let x0 = predict_x0(x_t, &eps_hat, t, schedule, false)?;
    posterior_sample(x_t, &x0, coeffs, rng)
}
