//! Subcommand implementations. Every command writes only deterministic content.

use std::path::Path;
use std::sync::Arc;

use manipure_core::attacks::{self, Purifier};
use manipure_core::config::RunConfig;
use manipure_core::dataset::generate_dataset;
use manipure_core::denoiser::Denoiser;
use manipure_core::experiment::{self, Condition, Defense, EvalSet, OracleStats};
use manipure_core::mani::{self, ManiConfig};
use manipure_core::metrics;
use manipure_core::purify::{self, Pipeline};
use manipure_core::spectral;
use manipure_core::{store, Error, ImageTensor, Result, Tensor};
use serde::Serialize;

use crate::artifacts::{self, DATA_DIR, MODEL_DIR, ORACLE_MEAN_FILE, ORACLE_POWER_FILE};

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let data = generate_dataset(&cfg.dataset, cfg.seed)?;
    let dir = artifacts::prepare_dir(cfg, DATA_DIR)?;
    let manifest = artifacts::save_dataset(&dir, &data)?;
    let (train_x, _) = data.train_split();
    let stats = OracleStats::fit(&train_x)?;
    store::save_raw(dir.join(ORACLE_MEAN_FILE), &stats.mean)?;
    store::save_raw(dir.join(ORACLE_POWER_FILE), &stats.power)?;
    println!(
        "wrote {} images ({} test) to {} (sha256 {})",
        manifest.labels.len(),
        manifest.test.iter().filter(|t| **t).count(),
        dir.display(),
        manifest.images_sha256
    );
    Ok(())
}

pub fn train_clf(cfg: &RunConfig) -> Result<()> {
    let data = artifacts::load_dataset(cfg)?;
    let (clf, summary) = experiment::train_classifier(cfg, &data)?;
    let dir = artifacts::prepare_dir(cfg, MODEL_DIR)?;
    clf.save(&dir, Some(summary.clone()))?;
    println!(
        "trained {} epochs: loss {:.4}, train acc {:.3}, test acc {:.3}",
        summary.epochs, summary.final_loss, summary.train_accuracy, summary.test_accuracy
    );
    Ok(())
}

fn denoiser(cfg: &RunConfig) -> Result<Arc<dyn Denoiser>> {
    Ok(Arc::from(cfg.denoiser.build(&cfg.output_dir)?))
}

fn pipeline(cfg: &RunConfig, defense: Defense) -> Result<Option<Pipeline>> {
    let schedule = cfg.schedule.build()?;
    if defense == Defense::None {
        return Ok(None);
    }
    Ok(defense.pipeline(cfg, &schedule, &denoiser(cfg)?))
}

/// First `eval.n_samples` test images.
fn eval_split(cfg: &RunConfig) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let data = artifacts::load_dataset(cfg)?;
    let (mut xs, mut ys) = data.test_split();
    let n = cfg.eval.n_samples.min(xs.len());
    xs.truncate(n);
    ys.truncate(n);
    Ok((xs, ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    /// PGD with EOT averaging and identity gradients through a purifier.
    Bpda,
}

#[derive(Serialize)]
struct AttackManifest<'a> {
    method: &'a str,
    defense: &'a str,
    norm: &'a str,
    epsilon: f64,
    seed: u64,
    config_fingerprint: String,
    labels: &'a [usize],
    /// Whether the (defended) classifier misclassifies each adversarial image.
    success: Vec<bool>,
    success_rate: f64,
}

pub fn attack(cfg: &RunConfig, method: AttackMethod, defense: Defense) -> Result<()> {
    let clf = artifacts::load_classifier(cfg)?;
    let (xs, ys) = eval_split(cfg)?;
    let defense = if method == AttackMethod::Bpda {
        defense
    } else {
        Defense::None
    };
    let pipe = pipeline(cfg, defense)?;
    let eps = cfg.attack.epsilon();
    let adv = xs
        .iter()
        .zip(&ys)
        .enumerate()
        .map(|(i, (x, &y))| match (method, &pipe) {
            (AttackMethod::Fgsm, _) => attacks::fgsm(x, y, &clf, eps),
            (AttackMethod::Pgd, _) | (AttackMethod::Bpda, None) => {
                attacks::pgd(x, y, &clf, &cfg.attack, experiment::pgd_seed(cfg.seed, i))
            }
            (AttackMethod::Bpda, Some(p)) => {
                attacks::pgd_eot_bpda(x, y, &clf, p, &cfg.attack, experiment::bpda_seed(cfg.seed, i))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let judged = adv
        .iter()
        .enumerate()
        .map(|(i, a)| match &pipe {
            Some(p) => p.purify(a, experiment::purify_seed(cfg.seed, Condition::Bpda, i)),
            None => Ok(a.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = clf.predict_batch(&judged)?;
    let success: Vec<bool> = preds.iter().zip(&ys).map(|(p, y)| p != y).collect();
    let method_name = match method {
        AttackMethod::Fgsm => "fgsm",
        AttackMethod::Pgd => "pgd",
        AttackMethod::Bpda => "bpda",
    };
    let sub = match method {
        AttackMethod::Bpda => format!("attack/bpda_{}", defense.as_str()),
        _ => format!("attack/{method_name}"),
    };
    let dir = artifacts::prepare_dir(cfg, &sub)?;
    store::save_raw(dir.join("clean.mptf"), &Tensor::stack(&xs)?)?;
    store::save_raw(dir.join("adv.mptf"), &Tensor::stack(&adv)?)?;
    let success_rate = success.iter().filter(|s| **s).count() as f64 / success.len() as f64;
    artifacts::write_json(
        &dir.join("manifest.json"),
        &AttackManifest {
            method: method_name,
            defense: defense.as_str(),
            norm: cfg.attack.norm.as_str(),
            epsilon: eps,
            seed: cfg.seed,
            config_fingerprint: cfg.fingerprint(),
            labels: &ys,
            success,
            success_rate,
        },
    )?;
    println!(
        "{method_name} against {}: success rate {success_rate:.3} over {} images -> {}",
        defense.as_str(),
        xs.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct KlSummary {
    n: usize,
    estimator: metrics::KlEstimator,
    t_star: usize,
    kl_adaptive: f64,
    kl_uniform: f64,
    /// Fraction of samples whose adaptive noise is closer (in KL) to the perturbation.
    adaptive_closer_fraction: f64,
}

/// The only image of `images`, or the one at `index` when given.
fn pick(mut images: Vec<Tensor>, index: Option<usize>, what: &str) -> Result<Tensor> {
    match index {
        Some(i) if i < images.len() => Ok(images.swap_remove(i)),
        Some(i) => Err(Error::Shape(format!(
            "{what} holds {} images; index {i} is out of range",
            images.len()
        ))),
        None if images.len() == 1 => Ok(images.swap_remove(0)),
        None => Err(Error::Shape(format!(
            "{what} holds {} images; pass --index to choose one",
            images.len()
        ))),
    }
}

fn normalized_to_unit(field: &Tensor) -> Result<ImageTensor> {
    let max = field.max_abs();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    ImageTensor::new(field.map(|v| (v.abs() * scale).clamp(0.0, 1.0)))
}

pub fn purify(
    cfg: &RunConfig,
    input: &Path,
    clean: Option<&Path>,
    index: Option<usize>,
    defense: Defense,
) -> Result<()> {
    let x = ImageTensor::new(pick(artifacts::load_images(input)?, index, "--input")?)?;
    let (mani_cfg, freq_cfg) = defense
        .modules(cfg)
        .ok_or_else(|| Error::Config("purify needs a defense other than `none`".into()))?;
    let schedule = cfg.schedule.build()?;
    let den = denoiser(cfg)?;
    let out = purify::purify(
        &x,
        &mani_cfg,
        &freq_cfg,
        &cfg.reverse,
        &schedule,
        den.as_ref(),
        cfg.seed,
    )?;
    let dir = artifacts::prepare_dir(cfg, "purify")?;
    store::save_raw(dir.join("purified.mptf"), out.image.as_tensor())?;
    store::save_png(dir.join("purified.png"), &out.image)?;
    let analysis = match &out.analysis {
        Some(a) => a.clone(),
        None => mani::analyze(&purify::to_model_space(x.as_tensor()), &mani_cfg)?,
    };
    let map = analysis.map.to_tensor()?;
    store::save_raw(dir.join("weight_map.mptf"), &map)?;
    store::save_png(dir.join("weight_map.png"), &normalized_to_unit(&map)?)?;
    let mut steps = String::from("t,t_prev,low_band_deviation\n");
    for s in &out.steps {
        steps.push_str(&format!("{},{},{:e}\n", s.t, s.t_prev, s.low_band_deviation));
    }
    artifacts::write_text(&dir.join("steps.csv"), &steps)?;
    if let Some(clean_path) = clean {
        let c = pick(artifacts::load_images(clean_path)?, index, "--clean")?;
        let report = mani::noise_kl_report(
            x.as_tensor(),
            &c,
            &mani_cfg,
            &schedule,
            cfg.eval.kl_t_star,
            cfg.eval.kl_estimator,
            experiment::kl_seed(cfg.seed, 0),
        )?;
        store::save_raw(dir.join("heatmap.mptf"), &report.heatmap)?;
        store::save_png(dir.join("heatmap.png"), &store::diverging_image(&report.heatmap)?)?;
        artifacts::write_json(
            &dir.join("kl.json"),
            &KlSummary {
                n: 1,
                estimator: cfg.eval.kl_estimator,
                t_star: cfg.eval.kl_t_star,
                kl_adaptive: report.kl_adaptive,
                kl_uniform: report.kl_uniform,
                adaptive_closer_fraction: f64::from(u8::from(report.kl_adaptive < report.kl_uniform)),
            },
        )?;
    }
    println!(
        "purified with {} over {} reverse steps -> {}",
        defense.as_str(),
        out.steps.len(),
        dir.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let clf = artifacts::load_classifier(cfg)?;
    let (xs, ys) = eval_split(cfg)?;
    let rows = experiment::evaluate(
        cfg,
        &clf,
        denoiser(cfg)?,
        &EvalSet {
            images: &xs,
            labels: &ys,
        },
    )?;
    let dir = artifacts::prepare_dir(cfg, "eval")?;
    artifacts::write_text(&dir.join("results.csv"), &metrics::report_csv(&rows)?)?;
    for r in &rows {
        println!(
            "{:9} {:13} standard {:.3} robust {:.3}",
            r.defense, r.attack, r.standard_acc, r.robust_acc
        );
    }
    Ok(())
}

fn paired(clean: &Path, adv: &Path) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let xs = artifacts::load_images(clean)?;
    let advs = artifacts::load_images(adv)?;
    if xs.len() != advs.len() {
        return Err(Error::Shape(format!(
            "{} clean images but {} adversarial images",
            xs.len(),
            advs.len()
        )));
    }
    for (x, a) in xs.iter().zip(&advs) {
        x.ensure_same_dims(a, "clean/adversarial pair")?;
    }
    Ok((xs, advs))
}

fn perturbation(adv: &Tensor, clean: &Tensor) -> Result<Tensor> {
    adv.with_data(
        adv.data()
            .iter()
            .zip(clean.data())
            .map(|(a, c)| 2.0 * (a - c))
            .collect(),
    )
}

/// Per-sample noise KL against each adversarial perturbation.
fn kl_reports(cfg: &RunConfig, xs: &[Tensor], advs: &[Tensor]) -> Result<Vec<mani::NoiseKlReport>> {
    let schedule = cfg.schedule.build()?;
    xs.iter()
        .zip(advs)
        .enumerate()
        .map(|(i, (x, a))| {
            mani::noise_kl_report(
                a,
                x,
                &cfg.mani,
                &schedule,
                cfg.eval.kl_t_star,
                cfg.eval.kl_estimator,
                experiment::kl_seed(cfg.seed, i),
            )
        })
        .collect()
}

fn kl_summary(cfg: &RunConfig, reports: &[mani::NoiseKlReport]) -> KlSummary {
    let n = reports.len() as f64;
    KlSummary {
        n: reports.len(),
        estimator: cfg.eval.kl_estimator,
        t_star: cfg.eval.kl_t_star,
        kl_adaptive: reports.iter().map(|r| r.kl_adaptive).sum::<f64>() / n,
        kl_uniform: reports.iter().map(|r| r.kl_uniform).sum::<f64>() / n,
        adaptive_closer_fraction: reports.iter().filter(|r| r.kl_adaptive < r.kl_uniform).count() as f64 / n,
    }
}

/// Mean band profiles of clean images, adversarial images and perturbations,
/// all on the `[-1, 1]` scale. Shares are each profile normalized to sum 1.
pub fn analyze_spectrum(cfg: &RunConfig, clean: &Path, adv: &Path) -> Result<()> {
    let (xs, advs) = paired(clean, adv)?;
    let ManiConfig { n_bands, .. } = cfg.mani;
    let (h, w, _) = xs[0].hwc()?;
    let partition = spectral::make_band_partition(h, w, n_bands)?;
    let mut sums = vec![[0.0f64; 5]; n_bands];
    let mut high_band_wins = 0;
    for (x, a) in xs.iter().zip(&advs) {
        let pc = spectral::image_profile(&purify::to_model_space(x), &partition)?.band_mean_magnitude;
        let pa = spectral::image_profile(&purify::to_model_space(a), &partition)?.band_mean_magnitude;
        let pd = spectral::image_profile(&perturbation(a, x)?, &partition)?.band_mean_magnitude;
        let share = |p: &[f64]| {
            let total: f64 = p.iter().sum();
            p.iter()
                .map(|v| if total > 0.0 { v / total } else { 0.0 })
                .collect::<Vec<_>>()
        };
        let (sc, sd) = (share(&pc), share(&pd));
        if (n_bands / 2..n_bands).all(|b| sd[b] > sc[b]) {
            high_band_wins += 1;
        }
        for b in 0..n_bands {
            for (k, v) in [pc[b], pa[b], pd[b], sc[b], sd[b]].into_iter().enumerate() {
                sums[b][k] += v;
            }
        }
    }
    let n = xs.len() as f64;
    let mut csv = String::from("band,clean,adversarial,perturbation,clean_share,perturbation_share\n");
    for (b, s) in sums.iter().enumerate() {
        csv.push_str(&format!(
            "{b},{:e},{:e},{:e},{:e},{:e}\n",
            s[0] / n,
            s[1] / n,
            s[2] / n,
            s[3] / n,
            s[4] / n
        ));
    }
    let reports = kl_reports(cfg, &xs, &advs)?;
    let dir = artifacts::prepare_dir(cfg, "spectrum")?;
    artifacts::write_text(&dir.join("radial_profile.csv"), &csv)?;
    artifacts::write_json(&dir.join("kl.json"), &kl_summary(cfg, &reports))?;
    println!(
        "{} pairs: perturbation share exceeds clean share in every upper band for {high_band_wins} -> {}",
        xs.len(),
        dir.display()
    );
    Ok(())
}

/// Per-sample comparison of adaptive and uniform injected noise with the perturbation.
pub fn compare_noise(cfg: &RunConfig, clean: &Path, adv: &Path) -> Result<()> {
    let (xs, advs) = paired(clean, adv)?;
    let reports = kl_reports(cfg, &xs, &advs)?;
    let dir = artifacts::prepare_dir(cfg, "noise")?;
    let mut csv = String::from("index,kl_adaptive,kl_uniform\n");
    for (i, r) in reports.iter().enumerate() {
        csv.push_str(&format!("{i},{:e},{:e}\n", r.kl_adaptive, r.kl_uniform));
    }
    artifacts::write_text(&dir.join("comparison.csv"), &csv)?;
    let heatmaps: Vec<Tensor> = reports.iter().map(|r| r.heatmap.clone()).collect();
    store::save_raw(dir.join("heatmap.mptf"), &Tensor::stack(&heatmaps)?)?;
    store::save_png(dir.join("heatmap_0.png"), &store::diverging_image(&heatmaps[0])?)?;
    let summary = kl_summary(cfg, &reports);
    artifacts::write_json(&dir.join("kl.json"), &summary)?;
    println!(
        "mean KL adaptive {:.4} uniform {:.4}; adaptive closer for {:.0}% of {} samples -> {}",
        summary.kl_adaptive,
        summary.kl_uniform,
        100.0 * summary.adaptive_closer_fraction,
        summary.n,
        dir.display()
    );
    Ok(())
}
