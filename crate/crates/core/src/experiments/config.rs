use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitPlan, SyntheticSpec};
use crate::error::{Error, Result};
use crate::latent::EncoderConfig;
use crate::nn::TrainConfig;
use crate::noise::Mechanism;
use crate::oracle::RemoteConfig;

use super::fixture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(fixture::synthetic_spec())
    }
}

/// How the full dataset is cut. The private set is drawn from the pool
/// separately for every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub remote_train_count: usize,
    pub priv_pool_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let p = fixture::split_plan();
        Self {
            remote_train_count: p.remote_train_count,
            priv_pool_count: p.priv_pool_count,
            val_count: p.val_count,
            seed: p.seed,
        }
    }
}

impl SplitConfig {
    pub fn plan(&self, priv_size: usize) -> SplitPlan {
        SplitPlan {
            remote_train_count: self.remote_train_count,
            priv_pool_count: self.priv_pool_count,
            val_count: self.val_count,
            priv_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    pub mechanisms: Vec<Mechanism>,
    /// Empty means "calibrate first and use the calibrated value".
    pub epsilons: Vec<f64>,
    pub epsilon_post: Option<f64>,
    pub priv_size: usize,
    pub infer_size: usize,
    pub local_hidden: Vec<usize>,
    pub train: TrainConfig,
    pub query_batch: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            mechanisms: vec![Mechanism::Sup, Mechanism::Rand],
            epsilons: vec![],
            epsilon_post: None,
            priv_size: 300,
            infer_size: 30_000,
            local_hidden: fixture::local_hidden(),
            train: TrainConfig::default(),
            query_batch: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    /// Strictly descending.
    pub grid: Vec<f64>,
    /// `None` means `[1.5 / C, 3 / C]`.
    pub band: Option<(f64, f64)>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            grid: fixture::calibration_grid(),
            band: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub priv_sizes: Vec<usize>,
    pub infer_sizes: Vec<usize>,
    pub mechanisms: Vec<Mechanism>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            priv_sizes: vec![100, 200, 300],
            infer_sizes: vec![2_000, 10_000, 30_000],
            mechanisms: vec![Mechanism::Sup],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrendSection {
    /// Empty means the calibrated epsilon times each of `multipliers`.
    pub epsilons: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub mechanism: Mechanism,
}

impl Default for TrendSection {
    fn default() -> Self {
        Self {
            epsilons: vec![],
            multipliers: vec![1.0, 8.0, 64.0],
            mechanism: Mechanism::Sup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentSection {
    /// Explicit triplets; the first two classes feed Sup, the first feeds Rand.
    pub triplets: Vec<[usize; 3]>,
    /// Additional random triplets.
    pub random: usize,
    /// `None` uses the calibrated epsilon.
    pub epsilon: Option<f64>,
    /// Items per class drawn from the private pool.
    pub per_class: usize,
    pub cluster_size: usize,
    pub noise_copies: usize,
    pub grid: usize,
    pub encoder: EncoderConfig,
}

impl Default for LatentSection {
    fn default() -> Self {
        Self {
            triplets: vec![],
            random: 20,
            epsilon: None,
            per_class: 60,
            cluster_size: 300,
            noise_copies: 4,
            grid: crate::latent::DEFAULT_GRID,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSection {
    /// Images per row.
    pub count: usize,
    /// `None` uses the calibrated epsilon only.
    pub epsilons: Vec<f64>,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            count: 8,
            epsilons: vec![],
        }
    }
}

/// Everything a command needs. Every field has a default, so an empty file
/// is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Multiplies every infer size.
    pub scale: f64,
    pub repetitions: usize,
    /// Draw a fresh balanced private set for every repetition.
    pub vary_priv_subset: bool,
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub remote: RemoteConfig,
    pub pipeline: PipelineSection,
    pub calibration: CalibrationSection,
    pub sweep: SweepSection,
    pub trend: TrendSection,
    pub latent: LatentSection,
    pub render: RenderSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("results"),
            scale: 1.0,
            repetitions: 3,
            vary_priv_subset: true,
            dataset: DatasetSource::default(),
            split: SplitConfig::default(),
            remote: fixture::remote_config(),
            pipeline: PipelineSection::default(),
            calibration: CalibrationSection::default(),
            sweep: SweepSection::default(),
            trend: TrendSection::default(),
            latent: LatentSection::default(),
            render: RenderSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scale: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(s) = o.scale {
            self.scale = s;
        }
    }

    /// `size * scale`, rounded, at least 1.
    pub fn scaled(&self, size: usize) -> usize {
        ((size as f64 * self.scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Domain {
                param: "scale",
                expected: "finite and > 0",
                value: self.scale,
            });
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        let p = &self.pipeline;
        if p.mechanisms.is_empty() {
            return Err(Error::Config("pipeline.mechanisms is empty".into()));
        }
        if p.query_batch == 0 {
            return Err(Error::Config("pipeline.query_batch must be at least 1".into()));
        }
        if !valid_cell(p.priv_size, self.scaled(p.infer_size)) {
            return Err(Error::Config(format!(
                "infer size {} exceeds priv_size * (priv_size - 1) for priv_size {}",
                self.scaled(p.infer_size),
                p.priv_size
            )));
        }
        p.train.validate()?;
        self.remote.train.validate()?;
        Ok(())
    }
}

/// A grid cell is runnable when the candidate pool can supply the queries.
pub fn valid_cell(priv_size: usize, infer_size: usize) -> bool {
    infer_size >= 1 && infer_size <= priv_size.saturating_mul(priv_size.saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.pipeline.epsilons = vec![0.5, 2.0];
        c.latent.triplets = vec![[0, 1, 2]];
        c.dataset = DatasetSource::Idx {
            images: "a.idx".into(),
            labels: "b.idx".into(),
        };
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = ExperimentConfig::from_toml_str("repetitions = 5\n[pipeline]\nmechanisms = [\"rand\"]\n").unwrap();
        assert_eq!(c.repetitions, 5);
        assert_eq!(c.pipeline.mechanisms, vec![Mechanism::Rand]);
        assert_eq!(c.pipeline.priv_size, 300);
    }

    #[test]
    fn flags_override_file() {
        let mut c = ExperimentConfig::from_toml_str("seed = 4\nscale = 0.5\n").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            out: Some("x".into()),
            scale: None,
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.out, PathBuf::from("x"));
        assert_eq!(c.scale, 0.5);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.repetitions = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.pipeline.infer_size = 300 * 299 + 1;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.scale = 0.0;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("repetitions = \"x\"").is_err());
    }

    #[test]
    fn cells_respect_pair_count() {
        assert!(valid_cell(125, 15_500));
        assert!(valid_cell(2, 2));
        assert!(!valid_cell(2, 3));
        assert!(!valid_cell(1, 1));
    }
}
