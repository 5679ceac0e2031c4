use std::sync::Arc;

use manipure_core::config::RunConfig;
use manipure_core::dataset::generate_dataset;
use manipure_core::denoiser::Denoiser;
use manipure_core::experiment::{train_classifier, Defense, OracleStats};
use manipure_core::{spectral, store, ImageTensor};

#[test]
fn long_training_reaches_high_test_accuracy() {
    let mut cfg = RunConfig::default();
    cfg.classifier.epochs = 300;
    let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let (_, summary) = train_classifier(&cfg, &data).unwrap();
    assert!(summary.test_accuracy >= 0.90, "test accuracy {}", summary.test_accuracy);
    assert!(summary.final_loss.is_finite());
}

fn small_config() -> RunConfig {
    RunConfig::from_json(
        r#"{
            "dataset": {"n_per_class": 20, "height": 16, "width": 16},
            "mani": {"n_bands": 4},
            "reverse": {"t_start": 20, "n_steps": 4}
        }"#,
    )
    .unwrap()
}

#[test]
fn every_defense_purifies_deterministically_and_stays_in_range() {
    let cfg = small_config();
    let schedule = cfg.schedule.build().unwrap();
    let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let (images, _) = data.train_split();
    let denoiser: Arc<dyn Denoiser> = Arc::new(OracleStats::fit(&images).unwrap().denoiser().unwrap());
    let x = ImageTensor::new(images[0].clone()).unwrap();
    for defense in Defense::ALL {
        let Some(pipeline) = defense.pipeline(&cfg, &schedule, &denoiser) else {
            assert_eq!(defense, Defense::None);
            continue;
        };
        let a = pipeline.run(&x, 11).unwrap();
        let b = pipeline.run(&x, 11).unwrap();
        let c = pipeline.run(&x, 12).unwrap();
        assert_eq!(a.image, b.image, "{}", defense.as_str());
        assert_ne!(a.image, c.image, "{}", defense.as_str());
        assert!(a.image.as_tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.steps.len(), cfg.reverse.n_steps);
    }
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let cfg = small_config();
    std::fs::write(&path, cfg.to_json_pretty()).unwrap();
    let back = RunConfig::from_path(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.run_id(), cfg.run_id());
    assert!(RunConfig::from_path(&dir.path().join("missing.json")).is_err());
}

#[test]
fn stored_images_and_spectra_round_trip() {
    let cfg = small_config();
    let data = generate_dataset(&cfg.dataset, 3).unwrap();
    let (images, _) = data.test_split();
    let dir = tempfile::tempdir().unwrap();

    let raw = dir.path().join("x.mptf");
    store::save_raw(&raw, &images[0]).unwrap();
    assert_eq!(store::load_raw(&raw).unwrap(), images[0]);

    // PNG quantizes to 8 bits.
    let png = dir.path().join("x.png");
    let img = ImageTensor::new(images[0].clone()).unwrap();
    store::save_png(&png, &img).unwrap();
    let back = store::load_png(&png).unwrap();
    for (a, b) in img.as_tensor().data().iter().zip(back.as_tensor().data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }

    let spectrum = spectral::dft(&images[0]).unwrap();
    let rebuilt = spectral::idft(&spectral::recompose(&spectral::decompose(&spectrum)).unwrap()).unwrap();
    for (a, b) in images[0].data().iter().zip(rebuilt.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}
