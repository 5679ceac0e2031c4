//! Shared experiment harness: classifier training, oracle statistics and the
//! defense-by-condition evaluation grid.

use std::sync::Arc;

use crate::attacks::{self, AttackConfig, Purifier};
use crate::classifier::{self, Activation, Classifier, TrainSummary};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::denoiser::{self, Covariance, Denoiser, OracleGaussian};
use crate::error::{Error, Result};
use crate::freqpure::FreqPureConfig;
use crate::mani::{self, ManiConfig};
use crate::metrics::{self, ReportRow};
use crate::purify::Pipeline;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

// Seed-derivation tags, one per stochastic purpose.
const TAG_INIT: u64 = 1;
const TAG_PGD: u64 = 2;
const TAG_BPDA: u64 = 3;
const TAG_PURIFY: u64 = 4;
const TAG_KL: u64 = 5;

pub fn init_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[TAG_INIT])
}

pub fn pgd_seed(seed: u64, sample: usize) -> u64 {
    rng::derive_seed(seed, &[TAG_PGD, sample as u64])
}

pub fn bpda_seed(seed: u64, sample: usize) -> u64 {
    rng::derive_seed(seed, &[TAG_BPDA, sample as u64])
}

/// Purification seed; shared by every defense so that comparisons are paired.
pub fn purify_seed(seed: u64, condition: Condition, sample: usize) -> u64 {
    rng::derive_seed(seed, &[TAG_PURIFY, condition as u64, sample as u64])
}

pub fn kl_seed(seed: u64, sample: usize) -> u64 {
    rng::derive_seed(seed, &[TAG_KL, sample as u64])
}

/// Initializes and trains the classifier on the training split.
pub fn train_classifier(cfg: &RunConfig, data: &Dataset) -> Result<(Classifier, TrainSummary)> {
    let d = &data.config;
    let tc = &cfg.classifier;
    let mut clf = Classifier::init(
        &[d.height, d.width, d.channels],
        tc.hidden,
        d.classes,
        Activation::Tanh,
        tc.init_scale,
        init_seed(cfg.seed),
    )?;
    let (train_x, train_y) = data.train_split();
    let (test_x, test_y) = data.test_split();
    let report = classifier::train(&mut clf, &train_x, &train_y, tc.epochs, tc.lr)?;
    let summary = TrainSummary {
        epochs: tc.epochs,
        lr: tc.lr,
        seed: cfg.seed,
        final_loss: report.final_loss,
        train_accuracy: metrics::accuracy(&clf.predict_batch(&train_x)?, &train_y)?,
        test_accuracy: metrics::accuracy(&clf.predict_batch(&test_x)?, &test_y)?,
    };
    Ok((clf, summary))
}

/// Pixel-space statistics of the training images behind the Gaussian oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleStats {
    /// Mean image, `H×W×C`.
    pub mean: Tensor,
    /// Channel-planar power spectrum of the centered images, stored as `C×H×W`.
    pub power: Tensor,
}

impl OracleStats {
    pub fn fit(images: &[Tensor]) -> Result<Self> {
        let mean = denoiser::mean_image(images)?;
        let (h, w, c) = mean.hwc()?;
        let power = Tensor::from_f64(vec![c, h, w], &denoiser::power_spectrum(images, &mean)?)?;
        Ok(Self { mean, power })
    }

    pub fn denoiser(&self) -> Result<OracleGaussian> {
        OracleGaussian::from_pixel_stats(&self.mean, Covariance::Spectral(self.power.to_f64()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Defense {
    None,
    /// Uniform noise, no frequency correction.
    DiffPure,
    ManiOnly,
    FreqPureOnly,
    ManiPure,
}

impl Defense {
    pub const ALL: [Defense; 5] = [
        Defense::None,
        Defense::DiffPure,
        Defense::ManiOnly,
        Defense::FreqPureOnly,
        Defense::ManiPure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::DiffPure => "diffpure",
            Self::ManiOnly => "mani",
            Self::FreqPureOnly => "freqpure",
            Self::ManiPure => "manipure",
        }
    }

    /// Noise shaping and frequency correction this defense uses, derived from the run config.
    pub fn modules(self, cfg: &RunConfig) -> Option<(ManiConfig, FreqPureConfig)> {
        let uniform = ManiConfig { gamma: 0.0, ..cfg.mani };
        let off = FreqPureConfig {
            enabled: false,
            ..cfg.freqpure
        };
        let on = FreqPureConfig {
            enabled: true,
            ..cfg.freqpure
        };
        match self {
            Self::None => None,
            Self::DiffPure => Some((uniform, off)),
            Self::ManiOnly => Some((cfg.mani, off)),
            Self::FreqPureOnly => Some((uniform, on)),
            Self::ManiPure => Some((cfg.mani, on)),
        }
    }

    pub fn pipeline(self, cfg: &RunConfig, schedule: &NoiseSchedule, denoiser: &Arc<dyn Denoiser>) -> Option<Pipeline> {
        self.modules(cfg).map(|(mani, freqpure)| Pipeline {
            mani,
            freqpure,
            reverse: cfg.reverse,
            schedule: schedule.clone(),
            denoiser: Arc::clone(denoiser),
        })
    }
}

impl std::str::FromStr for Defense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown defense `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Clean = 0,
    Pgd = 1,
    Bpda = 2,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Clean, Condition::Pgd, Condition::Bpda];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Pgd => "pgd",
            Self::Bpda => "pgd_eot_bpda",
        }
    }
}

/// Test images and labels evaluated by [`evaluate`].
pub struct EvalSet<'a> {
    pub images: &'a [Tensor],
    pub labels: &'a [usize],
}

/// PGD examples against the bare classifier, one per image.
pub fn pgd_examples(clf: &Classifier, set: &EvalSet<'_>, attack: &AttackConfig, seed: u64) -> Result<Vec<Tensor>> {
    set.images
        .iter()
        .zip(set.labels)
        .enumerate()
        .map(|(i, (x, &y))| attacks::pgd(x, y, clf, attack, pgd_seed(seed, i)))
        .collect()
}

fn purify_all(pipeline: Option<&Pipeline>, images: &[Tensor], seed: u64, condition: Condition) -> Result<Vec<Tensor>> {
    images
        .iter()
        .enumerate()
        .map(|(i, x)| match pipeline {
            Some(p) => p.purify(x, purify_seed(seed, condition, i)),
            None => Ok(x.clone()),
        })
        .collect()
}

fn mean_ssim(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let total = a.iter().zip(b).map(|(x, y)| metrics::ssim(x, y)).sum::<Result<f64>>()?;
    Ok(total / a.len() as f64)
}

/// Accuracy of one defense under one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub accuracy: f64,
    /// Mean SSIM between the classifier's input and the clean image.
    pub mean_ssim: f64,
}

/// Runs one defense under one condition. `pgd_adv` supplies the shared
/// transfer examples for [`Condition::Pgd`].
pub fn evaluate_cell(
    cfg: &RunConfig,
    clf: &Classifier,
    pipeline: Option<&Pipeline>,
    set: &EvalSet<'_>,
    condition: Condition,
    pgd_adv: &[Tensor],
) -> Result<CellResult> {
    let inputs = match condition {
        Condition::Clean => set.images.to_vec(),
        Condition::Pgd => pgd_adv.to_vec(),
        Condition::Bpda => match pipeline {
            // Identity gradients through an identity purifier reduce to plain PGD.
            None => pgd_adv.to_vec(),
            Some(p) => set
                .images
                .iter()
                .zip(set.labels)
                .enumerate()
                .map(|(i, (x, &y))| attacks::pgd_eot_bpda(x, y, clf, p, &cfg.attack, bpda_seed(cfg.seed, i)))
                .collect::<Result<Vec<_>>>()?,
        },
    };
    let purified = purify_all(pipeline, &inputs, cfg.seed, condition)?;
    Ok(CellResult {
        accuracy: metrics::accuracy(&clf.predict_batch(&purified)?, set.labels)?,
        mean_ssim: mean_ssim(&purified, set.images)?,
    })
}

/// Mean adaptive and uniform noise KL against the PGD perturbations.
pub fn mean_noise_kl(
    cfg: &RunConfig,
    mani_cfg: &ManiConfig,
    schedule: &NoiseSchedule,
    set: &EvalSet<'_>,
    pgd_adv: &[Tensor],
) -> Result<(f64, f64)> {
    let (mut adaptive, mut uniform) = (0.0, 0.0);
    for (i, (a, x)) in pgd_adv.iter().zip(set.images).enumerate() {
        let r = mani::noise_kl_report(
            a,
            x,
            mani_cfg,
            schedule,
            cfg.eval.kl_t_star,
            cfg.eval.kl_estimator,
            kl_seed(cfg.seed, i),
        )?;
        adaptive += r.kl_adaptive;
        uniform += r.kl_uniform;
    }
    let n = pgd_adv.len() as f64;
    Ok((adaptive / n, uniform / n))
}

/// The full grid: every defense under clean inputs, transferred PGD and
/// adaptive PGD+EOT with identity gradients, in a fixed row order.
pub fn evaluate(
    cfg: &RunConfig,
    clf: &Classifier,
    denoiser: Arc<dyn Denoiser>,
    set: &EvalSet<'_>,
) -> Result<Vec<ReportRow>> {
    if set.images.is_empty() || set.images.len() != set.labels.len() {
        return Err(Error::config("evaluation needs matching, nonempty images and labels"));
    }
    let schedule = cfg.schedule.build()?;
    let pgd_adv = pgd_examples(clf, set, &cfg.attack, cfg.seed)?;
    let run_id = cfg.run_id();
    let mut rows = Vec::with_capacity(Defense::ALL.len() * Condition::ALL.len());
    for defense in Defense::ALL {
        let pipeline = defense.pipeline(cfg, &schedule, &denoiser);
        let kl = match defense.modules(cfg) {
            Some((mani_cfg, _)) => Some(mean_noise_kl(cfg, &mani_cfg, &schedule, set, &pgd_adv)?),
            None => None,
        };
        let mut standard = 0.0;
        for condition in Condition::ALL {
            let cell = evaluate_cell(cfg, clf, pipeline.as_ref(), set, condition, &pgd_adv)?;
            if condition == Condition::Clean {
                standard = cell.accuracy;
            }
            let attacked = condition != Condition::Clean;
            rows.push(ReportRow {
                run_id: run_id.clone(),
                defense: defense.as_str().into(),
                attack: condition.as_str().into(),
                norm: cfg.attack.norm.as_str().into(),
                epsilon: if attacked { cfg.attack.epsilon() } else { 0.0 },
                standard_acc: standard,
                robust_acc: cell.accuracy,
                mean_ssim: Some(cell.mean_ssim),
                kl_adaptive: kl.filter(|_| condition == Condition::Pgd).map(|k| k.0),
                kl_uniform: kl.filter(|_| condition == Condition::Pgd).map(|k| k.1),
            });
        }
    }
    Ok(rows)
}
