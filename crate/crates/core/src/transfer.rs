//! The knowledge-transfer pipeline: protect the private set, grow a candidate
//! pool, label a random subset with the oracle, train a local model on those
//! noisy pairs, and evaluate it on the clean private and validation sets.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result, StageExt};
use crate::nn::{self, ModelParams, TrainConfig};
use crate::noise::{self, Mechanism, NoiseSpec, ProtectedImage};
use crate::oracle::{sidp_accuracy, LabelOracle};
use crate::seed::{self, SeedTriple};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    /// Second-layer budget for Rand; `None` reuses `epsilon`.
    pub epsilon_post: Option<f64>,
    pub priv_size: usize,
    pub infer_size: usize,
    /// Hidden widths of the local model `[D, hidden.., C]`.
    pub local_hidden: Vec<usize>,
    /// `seed` is ignored; the model seed of `seeds` is used instead.
    pub train: TrainConfig,
    pub seeds: SeedTriple,
    /// Images per oracle request.
    pub query_batch: usize,
}

impl PipelineConfig {
    pub fn new(mechanism: Mechanism, epsilon: f64, priv_size: usize, infer_size: usize) -> Self {
        Self {
            mechanism,
            epsilon,
            epsilon_post: None,
            priv_size,
            infer_size,
            local_hidden: vec![64],
            train: TrainConfig::default(),
            seeds: SeedTriple::new(0, 0, 0),
            query_batch: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        NoiseSpec::per_pixel(self.epsilon)?;
        if let Some(e) = self.epsilon_post {
            NoiseSpec::per_pixel(e)?;
        }
        let max = self.priv_size.saturating_mul(self.priv_size.saturating_sub(1));
        if self.infer_size == 0 || self.infer_size > max {
            return Err(Error::Size(format!(
                "infer_size {} outside 1..={max} for priv_size {}",
                self.infer_size, self.priv_size
            )));
        }
        if self.query_batch == 0 {
            return Err(Error::Size("query_batch must be at least 1".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub epsilon_post: Option<f64>,
    pub priv_size: usize,
    pub infer_size: usize,
    pub seeds: SeedTriple,
    pub sidp_acc: f64,
    pub local_acc_priv: f64,
    pub local_acc_val: f64,
    /// Oracle labels requested to build the local training set.
    pub query_count: u64,
    pub wall_time: f64,
    pub p_value: Option<f64>,
}

impl RunReport {
    /// Equality on every field except wall time.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        &a == other
    }
}

/// Everything a run produced, for callers that need more than the report.
pub struct RunArtifacts {
    pub report: RunReport,
    pub protected: Vec<ProtectedImage>,
    pub local_model: ModelParams,
    pub loss_trace: Vec<f64>,
}

/// Seed of the base noise layer.
pub fn base_noise_seed(seeds: &SeedTriple) -> u64 {
    seed::derive(seeds.noise, 0, 0)
}

/// Seed of the Rand second layer.
pub fn post_noise_seed(seeds: &SeedTriple) -> u64 {
    seed::derive(seeds.noise, 0, 1)
}

fn local_train_config(cfg: &PipelineConfig) -> TrainConfig {
    TrainConfig {
        seed: seed::derive(cfg.seeds.model, 0, 1),
        ..cfg.train.clone()
    }
}

/// Rebuilds the inference subset a run with `cfg` would query, from the
/// protected images alone.
pub fn inference_candidates(
    protected: &[ProtectedImage],
    cfg: &PipelineConfig,
) -> Result<noise::CandidateSet> {
    let base = NoiseSpec::per_pixel(cfg.epsilon)?;
    let post = cfg.epsilon_post.map(NoiseSpec::per_pixel).transpose()?;
    let cand = noise::build_candidate_set(
        protected,
        cfg.mechanism,
        base,
        post,
        post_noise_seed(&cfg.seeds),
    )?;
    noise::select_inference_subset(&cand, cfg.infer_size, cfg.seeds.subset)
}

/// Runs the pipeline and returns its report.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    d_priv: &LabeledDataset,
    d_val: &LabeledDataset,
    oracle: &dyn LabelOracle,
) -> Result<RunReport> {
    run_pipeline_detailed(cfg, d_priv, d_val, oracle).map(|a| a.report)
}

pub fn run_pipeline_detailed(
    cfg: &PipelineConfig,
    d_priv: &LabeledDataset,
    d_val: &LabeledDataset,
    oracle: &dyn LabelOracle,
) -> Result<RunArtifacts> {
    let started = Instant::now();
    cfg.validate().stage("config")?;
    if d_priv.len() != cfg.priv_size {
        return Err(Error::Size(format!(
            "config expects {} private items, got {}",
            cfg.priv_size,
            d_priv.len()
        ))
        .at_stage("config"));
    }
    if d_priv.input_dim() != oracle.input_dim() {
        return Err(Error::Shape {
            expected: oracle.input_dim(),
            actual: d_priv.input_dim(),
        }
        .at_stage("config"));
    }

    let base = NoiseSpec::per_pixel(cfg.epsilon).stage("base-noise")?;
    let protected = noise::protect_dataset(d_priv, &base, base_noise_seed(&cfg.seeds));

    let sidp_acc = sidp_accuracy(oracle, &protected, d_priv.labels()).stage("sidp")?;

    let infer = inference_candidates(&protected, cfg).stage("candidates")?;
    let queries = infer.materialize();

    let mut labels = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(cfg.query_batch) {
        labels.extend(oracle.query(chunk).stage("query")?);
    }
    let query_count = labels.len() as u64;

    let mut dims = vec![d_priv.input_dim()];
    dims.extend(&cfg.local_hidden);
    dims.push(oracle.num_classes());
    let init = nn::init_model(&dims, seed::derive(cfg.seeds.model, 0, 0)).stage("train")?;
    let (local_model, loss_trace) =
        nn::train(&init, &queries, &labels, &local_train_config(cfg)).stage("train")?;

    let local_acc_priv =
        nn::accuracy(&local_model, d_priv.images(), d_priv.labels()).stage("evaluate")?;
    let local_acc_val =
        nn::accuracy(&local_model, d_val.images(), d_val.labels()).stage("evaluate")?;

    Ok(RunArtifacts {
        report: RunReport {
            mechanism: cfg.mechanism,
            epsilon: cfg.epsilon,
            epsilon_post: cfg.epsilon_post,
            priv_size: cfg.priv_size,
            infer_size: cfg.infer_size,
            seeds: cfg.seeds,
            sidp_acc,
            local_acc_priv,
            local_acc_val,
            query_count,
            wall_time: started.elapsed().as_secs_f64(),
            p_value: None,
        },
        protected,
        local_model,
        loss_trace,
    })
}

/// Number of noise draws averaged per grid point during calibration.
pub const CALIBRATION_DRAWS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub epsilon: f64,
    pub sidp_acc: f64,
    pub band: (f64, f64),
    /// Where the chosen accuracy sits in the band: 0 at the low edge, 1 at the high edge.
    pub band_position: f64,
    /// `(epsilon, mean SIDP accuracy)` for every grid point, in grid order.
    pub measured: Vec<(f64, f64)>,
}

/// Mean SIDP accuracy at `epsilon` over [`CALIBRATION_DRAWS`] noise draws.
pub fn mean_sidp(oracle: &dyn LabelOracle, d_priv: &LabeledDataset, epsilon: f64, seed: u64) -> Result<f64> {
    let spec = NoiseSpec::per_pixel(epsilon)?;
    let mut total = 0.0;
    for k in 0..CALIBRATION_DRAWS {
        let protected = noise::protect_dataset(d_priv, &spec, seed::derive(seed, 10, k));
        total += sidp_accuracy(oracle, &protected, d_priv.labels())?;
    }
    Ok(total / CALIBRATION_DRAWS as f64)
}

/// The band `[1.5 / C, 3 / C]` of 1.5x to 3x random guessing.
pub fn default_band(num_classes: usize) -> (f64, f64) {
    let c = num_classes as f64;
    (1.5 / c, (3.0 / c).min(1.0))
}

/// Picks the smallest `epsilon` of a descending grid whose mean SIDP accuracy
/// lies inside `band`.
pub fn calibrate_epsilon(
    oracle: &dyn LabelOracle,
    d_priv: &LabeledDataset,
    band: (f64, f64),
    grid: &[f64],
    seed: u64,
) -> Result<Calibration> {
    let (low, high) = band;
    if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low >= high {
        return Err(Error::Validation(format!(
            "calibration band [{low}, {high}] must satisfy 0 <= low < high <= 1"
        )));
    }
    if grid.is_empty() {
        return Err(Error::Size("calibration grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Validation(format!(
            "calibration grid must be strictly descending: {grid:?}"
        )));
    }
    let measured = grid
        .iter()
        .map(|&eps| mean_sidp(oracle, d_priv, eps, seed).map(|acc| (eps, acc)))
        .collect::<Result<Vec<_>>>()?;
    match measured
        .iter()
        .rev()
        .find(|(_, acc)| (low..=high).contains(acc))
    {
        Some(&(epsilon, sidp_acc)) => Ok(Calibration {
            epsilon,
            sidp_acc,
            band,
            band_position: (sidp_acc - low) / (high - low),
            measured,
        }),
        None => Err(Error::Calibration {
            low,
            high,
            measured,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub epsilon: f64,
    pub sidp_acc: f64,
    pub acc_priv: f64,
    pub acc_val: f64,
    pub gap: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendTable {
    pub rows: Vec<TrendRow>,
    /// Set when fewer than three seed triples were averaged.
    pub low_confidence: bool,
    pub reports: Vec<RunReport>,
}

/// Runs `base` at every epsilon of the grid for every seed triple and
/// averages the private and validation accuracies.
pub fn generalization_trend(
    base: &PipelineConfig,
    epsilons: &[f64],
    seeds: &[SeedTriple],
    d_priv: &LabeledDataset,
    d_val: &LabeledDataset,
    oracle: &dyn LabelOracle,
) -> Result<TrendTable> {
    if epsilons.len() < 3 {
        return Err(Error::Size(format!(
            "a trend needs at least 3 epsilon values, got {}",
            epsilons.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Size("a trend needs at least one seed triple".into()));
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    let mut reports = Vec::with_capacity(epsilons.len() * seeds.len());
    for &epsilon in epsilons {
        let runs = seeds
            .iter()
            .map(|&s| {
                let cfg = PipelineConfig {
                    epsilon,
                    seeds: s,
                    ..base.clone()
                };
                run_pipeline(&cfg, d_priv, d_val, oracle)
            })
            .collect::<Result<Vec<_>>>()?;
        let col = |f: fn(&RunReport) -> f64| stats::mean(&runs.iter().map(f).collect::<Vec<_>>());
        let acc_priv = col(|r| r.local_acc_priv);
        let acc_val = col(|r| r.local_acc_val);
        rows.push(TrendRow {
            epsilon,
            sidp_acc: col(|r| r.sidp_acc),
            acc_priv,
            acc_val,
            gap: acc_priv - acc_val,
            runs: runs.len(),
        });
        reports.extend(runs);
    }
    Ok(TrendTable {
        rows,
        low_confidence: seeds.len() < 3,
        reports,
    })
}
