//! Run configuration: one TOML file describing data, split, model, training,
//! and baseline settings. All randomness is derived from the top-level seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::KnnConfig;
use crate::dataset::{generate_synthetic, load_triplets, Dataset, SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        patients: usize,
        events: usize,
        rank: usize,
        density: f64,
    },
    Triplets {
        triplets: PathBuf,
        demographics: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub test_mask_fraction: f64,
    pub min_event_frequency: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSection {
    /// Caps worker threads; defaults to the available cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub split: SplitSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub knn: KnnConfig,
    #[serde(default)]
    pub runtime: RuntimeSection,
}

impl RunConfig {
    /// The synthetic desk-scale benchmark with default hyperparameters.
    pub fn synthetic_benchmark(seed: u64) -> Self {
        Self {
            seed,
            output_dir: PathBuf::from("runs"),
            data: DataSource::Synthetic { patients: 5000, events: 500, rank: 10, density: 0.02 },
            split: SplitSection { train_fraction: 0.7, test_mask_fraction: 0.3, min_event_frequency: 0.001 },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            knn: KnnConfig::default(),
            runtime: RuntimeSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative data paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Triplets { triplets, demographics } = &mut cfg.data {
            for p in [triplets, demographics] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.split_spec().validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.knn.k_neighbors == 0 {
            return Err(Error::Config("knn.k_neighbors must be at least 1".into()));
        }
        if let DataSource::Synthetic { patients, events, rank, density } = self.data {
            if rank == 0 || rank >= patients.min(events) || !(density > 0.0 && density < 0.5) {
                return Err(Error::Config(
                    "data: synthetic needs 0 < rank < min(patients, events) and 0 < density < 0.5".into(),
                ));
            }
        }
        if self.runtime.workers == Some(0) {
            return Err(Error::Config("runtime.workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.split.train_fraction,
            test_mask_fraction: self.split.test_mask_fraction,
            min_event_frequency: self.split.min_event_frequency,
            seed: derive_seed(self.seed, "split", 0),
        }
    }

    /// Training settings with the seed derived from the top-level seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, "train", 0), ..self.train }
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data", 0)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic { patients, events, rank, density } => {
                let spec = SyntheticSpec { patients: *patients, events: *events, rank: *rank, density: *density };
                Ok(generate_synthetic(&spec, self.data_seed())?.0)
            }
            DataSource::Triplets { triplets, demographics } => load_triplets(triplets, demographics),
        }
    }
}
