//! DDPM variance schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta1: 1e-4,
            beta_t: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.steps, self.beta1, self.beta_t)
    }
}

/// `β_t`, `α_t = 1 - β_t`, `ᾱ_t = Π α_s` and posterior variances
/// `σ²_t = (1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t`, for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma2: Vec<f64>,
}

/// Betas interpolated linearly from `beta1` (t = 1) to `beta_t` (t = T), endpoints exact.
pub fn linear_schedule(steps: usize, beta1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta1 > 0.0 && beta1 <= beta_t && beta_t < 1.0) {
        return Err(Error::config(format!(
            "schedule bounds must satisfy 0 < beta1 <= betaT < 1, got {beta1} and {beta_t}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta1
            } else {
                let f = i as f64 / (steps - 1) as f64;
                beta1 * (1.0 - f) + beta_t * f
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut sigma2 = Vec::with_capacity(betas.len());
        for (i, b) in betas.iter().enumerate() {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            sigma2.push((1.0 - prev) / (1.0 - alpha_bars[i]) * b);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigma2,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::config(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn sigma2(&self, t: usize) -> Result<f64> {
        Ok(self.sigma2[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_endpoints_exact() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert_eq!(s.beta(1000).unwrap(), 0.02);
        assert_eq!(s.sigma2(1).unwrap(), 0.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
    }

    #[test]
    fn single_step() {
        let s = linear_schedule(1, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 0.1);
    }

    #[test]
    fn invalid_bounds() {
        assert!(linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 0.03, 0.02).is_err());
        assert!(linear_schedule(10, 1e-4, 1.0).is_err());
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        assert!(s.beta(0).is_err());
        assert!(s.beta(11).is_err());
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn posterior_variance_closed_form() {
        let s = linear_schedule(50, 1e-3, 0.05).unwrap();
        for t in 2..=50 {
            let expected = (1.0 - s.alpha_bar(t - 1).unwrap()) / (1.0 - s.alpha_bar(t).unwrap()) * s.beta(t).unwrap();
            assert!((s.sigma2(t).unwrap() - expected).abs() < 1e-15);
            assert!(s.sigma2(t).unwrap() < s.beta(t).unwrap());
        }
    }
}
