//! Run configuration file (TOML).
//!
//! Every key is optional; missing keys take their defaults. Command-line
//! flags override file values, and `RADCAM_DATA_ROOT` overrides
//! `paths.data_root` unless `--data` is given.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radcam::evaluation::SensorFailure;
use radcam::model::ModelConfig;
use radcam::synthetic::{SceneConfig, SensorRig};
use radcam::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    /// Run directory for checkpoints, logs and reports.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { count: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fail_modality: SensorFailure,
    /// Detections below this score are dropped from `infer` output.
    pub min_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fail_modality: SensorFailure::None,
            min_score: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub runs: usize,
    pub warmup: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { runs: 100, warmup: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Data, weights, queries and batch order each draw from
    /// their own stream of it.
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub rig: SensorRig,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub benchmark: BenchmarkConfig,
}

/// Subsystem streams of the root seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Data = 1,
    Weights = 2,
    Queries = 3,
    Training = 4,
}

pub fn derive_seed(root: u64, stream: SeedStream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Copy with per-subsystem seeds filled in from the root seed.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.model.init_seed = derive_seed(self.seed, SeedStream::Weights);
        c.model.query_seed = derive_seed(self.seed, SeedStream::Queries);
        c.train.seed = derive_seed(self.seed, SeedStream::Training);
        c
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, SeedStream::Data)
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.scene.classes.len() != self.model.num_classes {
            bail!(
                "scene.classes has {} entries but model.num_classes is {}",
                self.scene.classes.len(),
                self.model.num_classes
            );
        }
        if self.scene.min_objects > self.scene.max_objects {
            bail!("scene.min_objects exceeds scene.max_objects");
        }
        if self.model.queries.count() < self.scene.max_objects {
            bail!("fewer queries than the largest possible object count");
        }
        if !(0.0..=1.0).contains(&self.eval.min_score) {
            bail!("eval.min_score must lie in [0, 1]");
        }
        Ok(())
    }
}
