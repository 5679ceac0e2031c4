//! Top-level run configuration: every hyperparameter in one JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::classifier::TrainConfig;
use crate::dataset::DatasetConfig;
use crate::denoiser::DenoiserSpec;
use crate::diffusion::ReverseConfig;
use crate::error::{Error, Result};
use crate::freqpure::FreqPureConfig;
use crate::mani::ManiConfig;
use crate::metrics::KlEstimator;
use crate::schedule::ScheduleConfig;

pub const DEFAULT_DENOISER: &str = "oracle:mu=data/oracle_mean.mptf,power=data/oracle_power.mptf";

/// File name of the resolved config copied into every output directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test images evaluated per defense and condition; capped by the test split size.
    pub n_samples: usize,
    /// Timestep whose noise level the noise comparison uses.
    pub kl_t_star: usize,
    pub kl_estimator: KlEstimator,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            kl_t_star: 100,
            kl_estimator: KlEstimator::BandMagnitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub classifier: TrainConfig,
    pub schedule: ScheduleConfig,
    pub mani: ManiConfig,
    pub freqpure: FreqPureConfig,
    pub reverse: ReverseConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    /// Relative paths in the denoiser string resolve against `output_dir`.
    #[serde(serialize_with = "ser_display", deserialize_with = "de_from_str")]
    pub denoiser: DenoiserSpec,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            classifier: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            mani: ManiConfig::default(),
            freqpure: FreqPureConfig::default(),
            reverse: ReverseConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
            denoiser: DEFAULT_DENOISER.parse().expect("default denoiser spec parses"),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn ser_display<S: Serializer>(v: &DenoiserSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn de_from_str<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DenoiserSpec, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl RunConfig {
    /// Parses and validates a JSON document; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("config field `{path}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.classifier.validate()?;
        let schedule = self.schedule.build()?;
        self.mani.validate()?;
        self.freqpure.validate()?;
        self.reverse.validate(schedule.len())?;
        self.attack.validate()?;
        if self.eval.n_samples == 0 {
            return Err(Error::config("eval.n_samples must be >= 1"));
        }
        if self.eval.kl_t_star == 0 || self.eval.kl_t_star > schedule.len() {
            return Err(Error::config(format!(
                "eval.kl_t_star must lie in 1..={}, got {}",
                schedule.len(),
                self.eval.kl_t_star
            )));
        }
        self.eval.kl_estimator.validate()?;
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON rendering, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Short run identifier derived from the fingerprint.
    pub fn run_id(&self) -> String {
        self.fingerprint()[..12].to_string()
    }
}
