//! On-disk layout of run artifacts under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use manipure_core::classifier::Classifier;
use manipure_core::config::{RunConfig, RESOLVED_CONFIG_FILE};
use manipure_core::dataset::{Dataset, DatasetConfig, Sample};
use manipure_core::{store, Error, ImageTensor, Result, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DATA_DIR: &str = "data";
pub const MODEL_DIR: &str = "model";
pub const IMAGES_FILE: &str = "images.mptf";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ORACLE_MEAN_FILE: &str = "oracle_mean.mptf";
pub const ORACLE_POWER_FILE: &str = "oracle_power.mptf";

/// Creates `out/sub` and writes the resolved config into it.
pub fn prepare_dir(cfg: &RunConfig, sub: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(sub);
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    write_text(&dir.join(RESOLVED_CONFIG_FILE), &cfg.to_json_pretty())?;
    Ok(dir)
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn require(path: &Path, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            path: path.to_path_buf(),
            hint: format!("run `manipure {command}` with the same config first"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: DatasetConfig,
    pub images_sha256: String,
    pub labels: Vec<usize>,
    pub test: Vec<bool>,
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<DatasetManifest> {
    let images: Vec<Tensor> = data.samples.iter().map(|s| s.image.as_tensor().clone()).collect();
    let path = dir.join(IMAGES_FILE);
    store::save_raw(&path, &Tensor::stack(&images)?)?;
    let manifest = DatasetManifest {
        seed: data.seed,
        config: data.config,
        images_sha256: sha256_file(&path)?,
        labels: data.labels(),
        test: data.samples.iter().map(|s| s.test).collect(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads the dataset written by `gen-data`, checking it matches the run config.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.output_dir.join(DATA_DIR);
    let manifest_path = dir.join(MANIFEST_FILE);
    require(&manifest_path, "gen-data")?;
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.config != cfg.dataset || manifest.seed != cfg.seed {
        return Err(Error::Config(format!(
            "{} was generated with a different dataset config or seed; rerun `manipure gen-data`",
            dir.display()
        )));
    }
    let images_path = dir.join(IMAGES_FILE);
    require(&images_path, "gen-data")?;
    if sha256_file(&images_path)? != manifest.images_sha256 {
        return Err(Error::Format(format!(
            "{} does not match its manifest hash",
            images_path.display()
        )));
    }
    let images = store::load_raw(&images_path)?.unstack()?;
    if images.len() != manifest.labels.len() || images.len() != manifest.test.len() {
        return Err(Error::Format(format!(
            "{} lists {} labels for {} images",
            manifest_path.display(),
            manifest.labels.len(),
            images.len()
        )));
    }
    let samples = images
        .into_iter()
        .zip(manifest.labels.iter().zip(&manifest.test))
        .map(|(image, (&label, &test))| {
            Ok(Sample {
                image: ImageTensor::new(image)?,
                label,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: manifest.config,
        seed: manifest.seed,
        samples,
    })
}

pub fn load_classifier(cfg: &RunConfig) -> Result<Classifier> {
    let dir = cfg.output_dir.join(MODEL_DIR);
    require(&dir.join(manipure_core::classifier::META_FILE), "train-clf")?;
    let (clf, _) = Classifier::load(&dir)?;
    let d = &cfg.dataset;
    if clf.input_dims() != [d.height, d.width, d.channels] || clf.classes() != d.classes {
        return Err(Error::Config(format!(
            "classifier in {} does not match the dataset shape; rerun `manipure train-clf`",
            dir.display()
        )));
    }
    Ok(clf)
}

/// Loads one image (`[H, W, C]`, PNG or MPTF) or a batch (`[N, H, W, C]` MPTF).
pub fn load_images(path: &Path) -> Result<Vec<Tensor>> {
    if !path.exists() {
        return Err(io(path, std::io::ErrorKind::NotFound.into()));
    }
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return Ok(vec![store::load_png(path)?.into_tensor()]);
    }
    let t = store::load_raw(path)?;
    let items = match t.dims().len() {
        3 => vec![t],
        4 => t.unstack()?,
        _ => {
            return Err(Error::Shape(format!(
                "{} has dims {:?}; expected [H, W, C] or [N, H, W, C]",
                path.display(),
                t.dims()
            )))
        }
    };
    items
        .into_iter()
        .map(|x| ImageTensor::new(x).map(ImageTensor::into_tensor))
        .collect()
}
