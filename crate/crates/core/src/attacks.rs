//! Gradient attacks on the toy classifier: FGSM, PGD under `ℓ∞`/`ℓ2`, and PGD
//! with EOT averaging and identity (BPDA) gradients through a stochastic purifier.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn default_epsilon(self) -> f64 {
        match self {
            Self::Linf => 8.0 / 255.0,
            Self::L2 => 0.5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linf => "linf",
            Self::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub norm: Norm,
    /// Budget; `None` selects the norm's default (8/255 for `ℓ∞`, 0.5 for `ℓ2`).
    pub epsilon: Option<f64>,
    pub step_size: f64,
    pub iterations: usize,
    pub eot_samples: usize,
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: None,
            step_size: 0.007,
            iterations: 10,
            eot_samples: 10,
            random_start: true,
        }
    }
}

impl AttackConfig {
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| self.norm.default_epsilon())
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.epsilon();
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::config(format!("attack.epsilon must be positive, got {eps}")));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!(
                "attack.step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("attack.iterations must be >= 1"));
        }
        if self.eot_samples == 0 {
            return Err(Error::config("attack.eot_samples must be >= 1"));
        }
        Ok(())
    }
}

/// Largest `f32` in `[0, 1]` whose distance to `x0` does not exceed `eps`,
/// moving from `v` toward `x0` only as far as rounding requires.
fn round_inward(v: f64, x0: f32, eps: f64) -> f32 {
    let mut out = v.clamp(0.0, 1.0) as f32;
    while (out as f64 - x0 as f64).abs() > eps {
        out = if out > x0 { out.next_down() } else { out.next_up() };
    }
    out
}

/// Projects `x` onto the `eps`-ball around `x0` and then onto `[0, 1]`.
pub fn project_ball(x: &Tensor, x0: &Tensor, norm: Norm, eps: f64) -> Result<Tensor> {
    x.ensure_same_dims(x0, "project_ball")?;
    let diff: Vec<f64> = x
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let data = match norm {
        Norm::Linf => diff
            .iter()
            .zip(x0.data())
            .map(|(d, &b)| round_inward(b as f64 + d.clamp(-eps, eps), b, eps))
            .collect(),
        Norm::L2 => {
            let n = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            let scale = if n > eps { eps / n } else { 1.0 };
            diff.iter()
                .zip(x0.data())
                .map(|(d, &b)| round_inward(b as f64 + d * scale, b, eps))
                .collect()
        }
    };
    x.with_data(data)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ascent step: signed for `ℓ∞`, normalized for `ℓ2`.
fn ascend(x: &Tensor, grad: &[f64], norm: Norm, step: f64) -> Result<Tensor> {
    let data = match norm {
        Norm::Linf => x
            .data()
            .iter()
            .zip(grad)
            .map(|(&v, g)| (v as f64 + step * sign(*g)) as f32)
            .collect(),
        Norm::L2 => {
            let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let scale = if n > 0.0 { step / n } else { 0.0 };
            x.data()
                .iter()
                .zip(grad)
                .map(|(&v, g)| (v as f64 + scale * g) as f32)
                .collect()
        }
    };
    x.with_data(data)
}

pub fn fgsm(x: &Tensor, label: usize, clf: &Classifier, eps: f64) -> Result<Tensor> {
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let (_, g) = clf.loss_and_input_gradient_at(&x.to_f64(), label)?;
    let stepped = ascend(x, &g, Norm::Linf, eps)?;
    project_ball(&stepped, x, Norm::Linf, eps)
}

fn random_start(x: &Tensor, norm: Norm, eps: f64, seed: u64) -> Result<Tensor> {
    let mut r = rng::seeded(rng::derive_seed(seed, &[u64::MAX]));
    let start = match norm {
        Norm::Linf => {
            let data = x
                .data()
                .iter()
                .map(|&v| (v as f64 + r.random_range(-eps..=eps)) as f32)
                .collect();
            x.with_data(data)?
        }
        Norm::L2 => {
            let dir = rng::standard_normal_vec(x.len(), &mut r);
            let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let radius = eps * r.random::<f64>();
            let data = x
                .data()
                .iter()
                .zip(&dir)
                .map(|(&v, d)| (v as f64 + radius * d / n) as f32)
                .collect();
            x.with_data(data)?
        }
    };
    project_ball(&start, x, norm, eps)
}

/// Projected gradient ascent on the classifier's cross-entropy.
pub fn pgd(x: &Tensor, label: usize, clf: &Classifier, cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    pgd_eot_bpda(
        x,
        label,
        clf,
        &IdentityPurifier,
        &AttackConfig { eot_samples: 1, ..*cfg },
        seed,
    )
}

/// A (possibly stochastic) input transformation applied before classification.
pub trait Purifier: Sync {
    fn purify(&self, x: &Tensor, seed: u64) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPurifier;

impl Purifier for IdentityPurifier {
    fn purify(&self, x: &Tensor, _seed: u64) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Wraps a purifier and counts invocations.
pub struct CountingPurifier<'a, P: Purifier> {
    pub inner: &'a P,
    calls: AtomicUsize,
}

impl<'a, P: Purifier> CountingPurifier<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: Purifier> Purifier for CountingPurifier<'_, P> {
    fn purify(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.purify(x, seed)
    }
}

/// Seed for the purifier call of EOT sample `sample` in iteration `iteration`.
pub fn eot_seed(attack_seed: u64, iteration: usize, sample: usize) -> u64 {
    rng::derive_seed(attack_seed, &[iteration as u64, sample as u64])
}

/// PGD whose gradient is the mean, over `eot_samples` purifier draws, of the
/// classifier gradient at the purified point, passed straight back to the input.
pub fn pgd_eot_bpda(
    x: &Tensor,
    label: usize,
    clf: &Classifier,
    purifier: &dyn Purifier,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    let eps = cfg.epsilon();
    let mut cur = if cfg.random_start {
        random_start(x, cfg.norm, eps, seed)?
    } else {
        x.clone()
    };
    for it in 0..cfg.iterations {
        let mut grad = vec![0.0f64; x.len()];
        for s in 0..cfg.eot_samples {
            let purified = purifier.purify(&cur, eot_seed(seed, it, s))?;
            let (_, g) = clf.loss_and_input_gradient_at(&purified.to_f64(), label)?;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if cfg.eot_samples > 1 {
            let k = cfg.eot_samples as f64;
            grad.iter_mut().for_each(|g| *g /= k);
        }
        let stepped = ascend(&cur, &grad, cfg.norm, cfg.step_size)?;
        cur = project_ball(&stepped, x, cfg.norm, eps)?;
    }
    Ok(cur)
}

/// `max|δ|` or `‖δ‖₂` of `x - x0`.
pub fn perturbation_norm(x: &Tensor, x0: &Tensor, norm: Norm) -> Result<f64> {
    x.ensure_same_dims(x0, "perturbation_norm")?;
    let d = x.data().iter().zip(x0.data()).map(|(&a, &b)| a as f64 - b as f64);
    Ok(match norm {
        Norm::Linf => d.fold(0.0, |m, v| m.max(v.abs())),
        Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Activation;

    fn image(seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(vec![8, 8, 3], (0..192).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    fn clf() -> Classifier {
        Classifier::init(&[8, 8, 3], 16, 3, Activation::Tanh, 0.1, 4).unwrap()
    }

    #[test]
    fn linf_projection() {
        let x0 = Tensor::filled(vec![8, 8, 1], 0.5).unwrap();
        let eps = 8.0 / 255.0;
        let far = x0.map(|v| v + 2.0 * eps as f32);
        let p = project_ball(&far, &x0, Norm::Linf, eps).unwrap();
        for v in p.data() {
            assert!(((*v as f64) - (0.5 + eps)).abs() < 1e-6);
            assert!((*v as f64 - 0.5) <= eps);
        }
        let inside = x0.map(|v| v + 0.01);
        assert_eq!(project_ball(&inside, &x0, Norm::Linf, eps).unwrap(), inside);
    }

    #[test]
    fn l2_projection_norm() {
        let x0 = Tensor::filled(vec![8, 8, 1], 0.5).unwrap();
        let mut r = rng::seeded(3);
        let dir = rng::standard_normal_vec(64, &mut r);
        let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let eps = 0.05;
        let far = x0
            .with_data(
                x0.data()
                    .iter()
                    .zip(&dir)
                    .map(|(&b, d)| (b as f64 + 3.0 * eps * d / n) as f32)
                    .collect(),
            )
            .unwrap();
        let p = project_ball(&far, &x0, Norm::L2, eps).unwrap();
        let got = perturbation_norm(&p, &x0, Norm::L2).unwrap();
        assert!((got - eps).abs() < 1e-6, "{got}");
    }

    #[test]
    fn fgsm_properties() {
        let (x, c) = (image(1), clf());
        assert_eq!(fgsm(&x, 0, &c, 0.0).unwrap(), x);
        let eps = 8.0 / 255.0;
        let adv = fgsm(&x, 0, &c, eps).unwrap();
        assert!(perturbation_norm(&adv, &x, Norm::Linf).unwrap() <= eps + 1e-9);
        assert!(c.loss(&adv, 0).unwrap() > c.loss(&x, 0).unwrap());
    }

    #[test]
    fn single_step_pgd_is_fgsm() {
        let (x, c) = (image(2), clf());
        let eps = 8.0 / 255.0;
        let cfg = AttackConfig {
            iterations: 1,
            random_start: false,
            step_size: eps,
            ..Default::default()
        };
        assert_eq!(pgd(&x, 1, &c, &cfg, 0).unwrap(), fgsm(&x, 1, &c, eps).unwrap());
        let bigger = AttackConfig { step_size: 1.0, ..cfg };
        assert_eq!(pgd(&x, 1, &c, &bigger, 0).unwrap(), fgsm(&x, 1, &c, eps).unwrap());
    }

    #[test]
    fn budgets_respected() {
        let c = clf();
        for norm in [Norm::Linf, Norm::L2] {
            let cfg = AttackConfig {
                norm,
                step_size: 0.05,
                ..Default::default()
            };
            for s in 0..20 {
                let x = image(10 + s);
                let adv = pgd(&x, (s % 3) as usize, &c, &cfg, s).unwrap();
                let d = perturbation_norm(&adv, &x, norm).unwrap();
                let tol = if norm == Norm::Linf { 1e-9 } else { 1e-6 };
                assert!(d <= cfg.epsilon() + tol, "{norm:?}: {d}");
                assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn eot_with_identity_matches_pgd_and_counts_calls() {
        let (x, c) = (image(5), clf());
        let cfg = AttackConfig {
            eot_samples: 1,
            ..Default::default()
        };
        let counted = CountingPurifier::new(&IdentityPurifier);
        let a = pgd_eot_bpda(&x, 2, &c, &counted, &cfg, 9).unwrap();
        assert_eq!(a, pgd(&x, 2, &c, &cfg, 9).unwrap());
        assert_eq!(counted.calls(), cfg.iterations);

        let k = AttackConfig {
            eot_samples: 4,
            iterations: 3,
            ..Default::default()
        };
        let counted = CountingPurifier::new(&IdentityPurifier);
        pgd_eot_bpda(&x, 2, &c, &counted, &k, 9).unwrap();
        assert_eq!(counted.calls(), 12);
    }

    #[test]
    fn deterministic() {
        let (x, c) = (image(6), clf());
        let cfg = AttackConfig::default();
        assert_eq!(pgd(&x, 0, &c, &cfg, 3).unwrap(), pgd(&x, 0, &c, &cfg, 3).unwrap());
        assert_ne!(pgd(&x, 0, &c, &cfg, 3).unwrap(), pgd(&x, 0, &c, &cfg, 4).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        assert_eq!(
            AttackConfig {
                norm: Norm::L2,
                ..Default::default()
            }
            .epsilon(),
            0.5
        );
        assert!(AttackConfig {
            epsilon: Some(0.0),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            eot_samples: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
