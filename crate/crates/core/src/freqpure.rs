//! Frequency purification applied during the reverse process.
//!
//! Inside the low-pass region the generated image takes the adversarial input's
//! magnitudes, and its phases are pulled to within `δ` (shortest arc) of the
//! adversarial phases. Outside the region the generated spectrum is kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{self, FilterMask, MagPhase};
use crate::tensor::Tensor;

/// Which reverse-process tensor the spectral correction is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqPureTarget {
    /// Correct the estimate `x̂_0` and use the result directly as the next state.
    Literal,
    /// Correct `x̂_0`, then draw the next state from the posterior around it.
    PredictedX0,
    /// Correct the posterior sample emitted by each step.
    PosteriorSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreqPureConfig {
    pub enabled: bool,
    /// Low-pass radius as a fraction of the maximum normalized radius.
    pub cutoff: f64,
    /// Phase projection radius in radians.
    pub delta: f64,
    /// Re-symmetrize the recombined spectrum before inverting it.
    pub resymmetrize: bool,
    pub target: FreqPureTarget,
}

impl Default for FreqPureConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            cutoff: 0.25,
            delta: 0.2,
            resymmetrize: false,
            target: FreqPureTarget::Literal,
        }
    }
}

impl FreqPureConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(Error::config(format!(
                "freqpure.cutoff must lie in (0, 1), got {}",
                self.cutoff
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::config(format!(
                "freqpure.delta must be >= 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

fn check_field(field: &[f64], mask: &FilterMask, what: &str) -> Result<()> {
    let plane = mask.height * mask.width;
    if field.is_empty() || !field.len().is_multiple_of(plane) {
        return Err(Error::shape(format!(
            "{what}: field of {} values does not tile a {}x{} mask",
            field.len(),
            mask.height,
            mask.width
        )));
    }
    Ok(())
}

/// `H·A_adv + (1 - H)·A_t`, with the mask broadcast over channel planes.
pub fn recombine_magnitude(a_adv: &[f64], a_t: &[f64], mask: &FilterMask) -> Result<Vec<f64>> {
    if a_adv.len() != a_t.len() {
        return Err(Error::shape("magnitude fields differ in size"));
    }
    check_field(a_t, mask, "recombine_magnitude")?;
    let plane = mask.height * mask.width;
    Ok(a_adv
        .iter()
        .zip(a_t)
        .enumerate()
        .map(|(i, (&adv, &cur))| {
            let m = mask.values[i % plane];
            m * adv + (1.0 - m) * cur
        })
        .collect())
}

/// Shortest signed arc from `b` to `a`, in `(-π, π]`.
pub fn wrapped_diff(a: f64, b: f64) -> f64 {
    spectral::wrap_angle(a - b)
}

/// Moves `phi_t` to the nearest angle within `delta` of `phi_adv` along the circle.
pub fn project_angle(phi_t: f64, phi_adv: f64, delta: f64) -> f64 {
    if delta >= std::f64::consts::PI {
        return phi_t;
    }
    let d = wrapped_diff(phi_t, phi_adv);
    if d.abs() <= delta {
        return phi_t;
    }
    spectral::wrap_angle(phi_adv + d.clamp(-delta, delta))
}

/// Elementwise [`project_angle`].
pub fn project_phase(phi_t: &[f64], phi_adv: &[f64], delta: f64) -> Result<Vec<f64>> {
    if phi_t.len() != phi_adv.len() {
        return Err(Error::shape("phase fields differ in size"));
    }
    Ok(phi_t
        .iter()
        .zip(phi_adv)
        .map(|(&t, &a)| project_angle(t, a, delta))
        .collect())
}

/// Masked cells take `phi_proj`, the rest keep `phi_t`.
pub fn recombine_phase(phi_proj: &[f64], phi_t: &[f64], mask: &FilterMask) -> Result<Vec<f64>> {
    if phi_proj.len() != phi_t.len() {
        return Err(Error::shape("phase fields differ in size"));
    }
    check_field(phi_t, mask, "recombine_phase")?;
    let plane = mask.height * mask.width;
    Ok(phi_proj
        .iter()
        .zip(phi_t)
        .enumerate()
        .map(|(i, (&p, &t))| if mask.is_set(i % plane) { p } else { t })
        .collect())
}

/// Precomputed state for repeated purification steps against one adversarial input.
#[derive(Debug, Clone)]
pub struct FreqPurifier {
    cfg: FreqPureConfig,
    adv: MagPhase,
    mask: FilterMask,
}

impl FreqPurifier {
    pub fn new(adv: MagPhase, cfg: FreqPureConfig) -> Result<Self> {
        cfg.validate()?;
        let mask = spectral::lowpass_mask(adv.height, adv.width, cfg.cutoff)?;
        Ok(Self { cfg, adv, mask })
    }

    pub fn from_image(x_adv: &Tensor, cfg: FreqPureConfig) -> Result<Self> {
        Self::new(spectral::decompose(&spectral::dft(x_adv)?), cfg)
    }

    pub fn config(&self) -> &FreqPureConfig {
        &self.cfg
    }

    pub fn mask(&self) -> &FilterMask {
        &self.mask
    }

    pub fn adversarial(&self) -> &MagPhase {
        &self.adv
    }

    /// One purification step. With `enabled = false` the input is returned unchanged.
    pub fn step(&self, x_candidate: &Tensor) -> Result<Tensor> {
        if !self.cfg.enabled {
            return Ok(x_candidate.clone());
        }
        spectral::idft(&self.corrected_spectrum(x_candidate)?)
    }

    /// The corrected spectrum of `x_candidate`, before the inverse transform and
    /// its rounding to `f32`. Applies the correction regardless of `enabled`.
    pub fn corrected_spectrum(&self, x_candidate: &Tensor) -> Result<spectral::Spectrum> {
        let (h, w, c) = x_candidate.hwc()?;
        if (h, w, c) != (self.adv.height, self.adv.width, self.adv.channels) {
            return Err(Error::shape(format!(
                "candidate {h}x{w}x{c} vs adversarial spectrum {}x{}x{}",
                self.adv.height, self.adv.width, self.adv.channels
            )));
        }
        let cur = spectral::decompose(&spectral::dft(x_candidate)?);
        let magnitude = recombine_magnitude(&self.adv.magnitude, &cur.magnitude, &self.mask)?;
        let projected = project_phase(&cur.phase, &self.adv.phase, self.cfg.delta)?;
        let mut phase = recombine_phase(&projected, &cur.phase, &self.mask)?;

        // Self-conjugate cells (DC and the Nyquist points) must stay real; keep the
        // generated phase when it is already feasible and fall back to the adversarial one.
        for ch in 0..c {
            for u in [0, h / 2] {
                for v in [0, w / 2] {
                    let cell = u * w + v;
                    if !self.mask.is_set(cell) {
                        continue;
                    }
                    let i = ch * h * w + cell;
                    let feasible = wrapped_diff(cur.phase[i], self.adv.phase[i]).abs() <= self.cfg.delta;
                    phase[i] = if feasible { cur.phase[i] } else { self.adv.phase[i] };
                }
            }
        }

        let mut spectrum = spectral::recompose(&MagPhase {
            height: h,
            width: w,
            channels: c,
            magnitude,
            phase,
        })?;
        if self.cfg.resymmetrize {
            spectrum.hermitian_symmetrize();
        }
        Ok(spectrum)
    }

    /// Largest `|A(x) - A_adv| / (1 + A_adv)` over masked coefficients.
    pub fn low_band_deviation(&self, x: &Tensor) -> Result<f64> {
        let mp = spectral::decompose(&spectral::dft(x)?);
        let plane = self.mask.height * self.mask.width;
        Ok(mp
            .magnitude
            .iter()
            .zip(&self.adv.magnitude)
            .enumerate()
            .filter(|(i, _)| self.mask.is_set(i % plane))
            .map(|(_, (a, b))| (a - b).abs() / (1.0 + b))
            .fold(0.0, f64::max))
    }
}

/// One-shot [`FreqPurifier::step`].
pub fn freqpure_step(x_candidate: &Tensor, adv: &MagPhase, cfg: &FreqPureConfig) -> Result<Tensor> {
    if !cfg.enabled {
        return Ok(x_candidate.clone());
    }
    FreqPurifier::new(adv.clone(), *cfg)?.step(x_candidate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use std::f64::consts::PI;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    fn mask_of(values: Vec<f64>, h: usize, w: usize) -> FilterMask {
        FilterMask {
            height: h,
            width: w,
            cutoff: 0.5,
            values,
        }
    }

    #[test]
    fn magnitude_selection_extremes() {
        let a_adv = vec![1.0, 2.0, 3.0, 4.0];
        let a_t = vec![5.0, 6.0, 7.0, 8.0];
        let ones = mask_of(vec![1.0; 4], 2, 2);
        let zeros = mask_of(vec![0.0; 4], 2, 2);
        assert_eq!(recombine_magnitude(&a_adv, &a_t, &ones).unwrap(), a_adv);
        assert_eq!(recombine_magnitude(&a_adv, &a_t, &zeros).unwrap(), a_t);
        assert!(recombine_magnitude(&a_adv, &a_t[..3], &ones).is_err());
    }

    #[test]
    fn magnitude_matches_radius_selection() {
        let (h, w) = (16, 16);
        let mask = spectral::lowpass_mask(h, w, 0.25).unwrap();
        let mut r = rng::seeded(4);
        let a_adv: Vec<f64> = (0..2 * h * w).map(|_| r.random::<f64>()).collect();
        let a_t: Vec<f64> = (0..2 * h * w).map(|_| r.random::<f64>()).collect();
        let out = recombine_magnitude(&a_adv, &a_t, &mask).unwrap();
        for i in 0..2 * h * w {
            let (u, v) = ((i % (h * w)) / w, i % w);
            let (du, dv) = (u.min(h - u), v.min(w - v));
            let expected = if du * du + dv * dv <= 8 { a_adv[i] } else { a_t[i] };
            assert_eq!(out[i], expected);
        }
    }

    #[test]
    fn projection_examples() {
        assert_abs_diff_eq!(project_angle(0.5, 0.3, 0.1), 0.4, epsilon = 1e-12);
        assert_eq!(project_angle(2.0, -1.0, PI), 2.0);
        assert_eq!(project_angle(0.35, 0.3, 0.1), 0.35);
        let wrapped = project_angle(3.1, -3.1, 0.05);
        assert_abs_diff_eq!(wrapped, spectral::wrap_angle(-3.15), epsilon = 1e-12);
        assert_abs_diff_eq!(wrapped, 3.1332, epsilon = 1e-4);
    }

    #[test]
    fn projection_solves_constrained_nearest_angle() {
        // Brute force: scan the feasible arc for the point closest to phi_t.
        let mut r = rng::seeded(12);
        for _ in 0..200 {
            let t = r.random_range(-PI..PI);
            let a = r.random_range(-PI..PI);
            let delta = r.random_range(0.0..1.0);
            let steps = 20_000;
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..=steps {
                let cand = a - delta + 2.0 * delta * k as f64 / steps as f64;
                let dist = wrapped_diff(t, cand).abs();
                if dist < best.0 {
                    best = (dist, cand);
                }
            }
            let got = project_angle(t, a, delta);
            assert!(wrapped_diff(got, best.1).abs() < 2.0 * delta / steps as f64 + 1e-9);
        }
    }

    #[test]
    fn phase_selection() {
        let proj = vec![1.0, 1.0, 1.0, 1.0];
        let cur = vec![2.0, 2.0, 2.0, 2.0];
        assert_eq!(recombine_phase(&proj, &cur, &mask_of(vec![0.0; 4], 2, 2)).unwrap(), cur);
        let adv = vec![0.1, -0.2, 3.0, -3.0];
        let collapsed = project_phase(&cur, &adv, 0.0).unwrap();
        let out = recombine_phase(&collapsed, &cur, &mask_of(vec![1.0; 4], 2, 2)).unwrap();
        for (o, a) in out.iter().zip(&adv) {
            assert_abs_diff_eq!(*o, *a, epsilon = 1e-12);
        }
        let m = mask_of(vec![1.0, 0.0, 1.0, 0.0], 2, 2);
        assert_eq!(recombine_phase(&proj, &cur, &m).unwrap(), vec![1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn disabled_is_identity() {
        let x = random_image(1, 8, 8, 3);
        let adv = spectral::decompose(&spectral::dft(&random_image(2, 8, 8, 3)).unwrap());
        let out = freqpure_step(&x, &adv, &FreqPureConfig::disabled()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn adversarial_input_is_a_fixed_point() {
        let x = random_image(3, 16, 16, 3);
        let p = FreqPurifier::from_image(&x, FreqPureConfig::default()).unwrap();
        let out = p.step(&x).unwrap();
        for (a, b) in x.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn low_band_magnitudes_follow_adversarial_input() {
        let adv = random_image(5, 16, 16, 3);
        let cand = random_image(6, 16, 16, 3).map(|v| v - 0.3);
        let p = FreqPurifier::from_image(&adv, FreqPureConfig::default()).unwrap();
        let out = p.step(&cand).unwrap();
        let mp = spectral::decompose(&spectral::dft(&out).unwrap());
        let plane = 256;
        for (i, (&a, &b)) in mp.magnitude.iter().zip(&p.adversarial().magnitude).enumerate() {
            if p.mask().is_set(i % plane) {
                assert!((a - b).abs() <= 1e-4 * (1.0 + b), "cell {i}: {a} vs {b}");
                let d = wrapped_diff(mp.phase[i], p.adversarial().phase[i]).abs();
                if b > 1e-6 {
                    assert!(d <= 0.2 + 1e-6, "cell {i}: phase gap {d}");
                }
            }
        }
        assert!(p.low_band_deviation(&out).unwrap() <= 1e-4);
    }

    #[test]
    fn negative_mean_candidate_keeps_dc_real() {
        // Candidate DC has phase π, adversarial DC has phase 0.
        let adv = random_image(7, 8, 8, 1);
        let cand = adv.map(|v| v - 1.0);
        let p = FreqPurifier::from_image(&adv, FreqPureConfig::default()).unwrap();
        let out = p.step(&cand).unwrap();
        let mean_adv: f64 = adv.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let mean_out: f64 = out.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        assert_abs_diff_eq!(mean_out, mean_adv, epsilon = 1e-6);
    }

    #[test]
    fn resymmetrize_option_runs() {
        let adv = random_image(8, 16, 16, 3);
        let cand = random_image(9, 16, 16, 3);
        let cfg = FreqPureConfig {
            resymmetrize: true,
            ..FreqPureConfig::default()
        };
        let a = FreqPurifier::from_image(&adv, cfg).unwrap().step(&cand).unwrap();
        let b = FreqPurifier::from_image(&adv, FreqPureConfig::default())
            .unwrap()
            .step(&cand)
            .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn config_validation() {
        assert!(FreqPureConfig {
            cutoff: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FreqPureConfig {
            cutoff: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FreqPureConfig {
            delta: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_is_idempotent_and_within_delta(
                t in -PI..PI, a in -PI..PI, delta in 0.0f64..4.0
            ) {
                let once = project_angle(t, a, delta);
                let twice = project_angle(once, a, delta);
                prop_assert!(wrapped_diff(once, twice).abs() <= 1e-12);
                if delta < PI {
                    prop_assert!(wrapped_diff(once, a).abs() <= delta + 1e-9);
                }
            }

            #[test]
            fn larger_delta_never_moves_further(
                t in -PI..PI, a in -PI..PI, d1 in 0.0f64..3.5, extra in 0.0f64..1.0
            ) {
                let near = wrapped_diff(project_angle(t, a, d1 + extra), t).abs();
                let far = wrapped_diff(project_angle(t, a, d1), t).abs();
                prop_assert!(near <= far + 1e-12);
            }
        }
    }
}
