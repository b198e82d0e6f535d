//! Command drivers: calibration, mechanism comparisons, size sweeps, epsilon
//! trends, latent studies and sample rendering.
//!
//! Every command writes `summary.csv` and `report.json` under the output
//! directory, per-run JSON under `runs/` and point data under `plots/`.
//! JSON artifacts embed the resolved config and master seed; CSV files carry
//! the master seed as a column.

pub mod config;
pub mod fixture;
pub mod output;

use std::collections::BTreeSet;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{load_idx, make_synthetic, sample_balanced_priv, split, LabeledDataset};
use crate::error::{Error, Result, StageExt};
use crate::latent::{self, StudyConfig, TripletDesign, TripletRecord};
use crate::noise::{self, Mechanism, NoiseSpec};
use crate::oracle::{fit_remote, LabelOracle, RemoteOracle};
use crate::seed::{self, SeedTriple};
use crate::stats::{self, PairedTTest};
use crate::transfer::{self, Calibration, PipelineConfig, RunReport, TrendRow};

pub use config::{valid_cell, DatasetSource, ExperimentConfig, Overrides};
use output::{num, Artifact, OutputDir};

const PRIV_STREAM: u64 = 4;
const CALIBRATION_STREAM: u64 = 5;
const LATENT_STREAM: u64 = 6;
const RENDER_STREAM: u64 = 7;

/// The remote oracle and the data partitions a command draws from.
#[derive(Debug)]
pub struct Lab {
    pub oracle: RemoteOracle,
    pub pool: LabeledDataset,
    pub val: LabeledDataset,
}

impl Lab {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let full = match &cfg.dataset {
            DatasetSource::Synthetic(spec) => make_synthetic(spec),
            DatasetSource::Idx { images, labels } => load_idx(images, labels),
        }
        .stage("dataset")?;
        let plan = cfg.split.plan(cfg.pipeline.priv_size);
        plan.validate(full.len(), full.num_classes()).stage("split")?;
        let (remote, pool, val) = split(&full, &plan).stage("split")?;
        let oracle = fit_remote(&remote, &cfg.remote).stage("remote")?;
        info!(
            "remote model ready: {} train / {} pool / {} val items",
            remote.len(),
            pool.len(),
            val.len()
        );
        Ok(Self { oracle, pool, val })
    }

    pub fn num_classes(&self) -> usize {
        self.oracle.num_classes()
    }

    /// The balanced private set of `size` items for `repetition`.
    pub fn priv_set(&self, cfg: &ExperimentConfig, size: usize, repetition: u64) -> Result<LabeledDataset> {
        let r = if cfg.vary_priv_subset { repetition } else { 0 };
        sample_balanced_priv(&self.pool, size, priv_seed(cfg.seed, r))
    }
}

/// Seed of the balanced private draw for a repetition.
pub fn priv_seed(master: u64, repetition: u64) -> u64 {
    seed::derive(master, PRIV_STREAM, repetition)
}

fn pipeline_config(cfg: &ExperimentConfig, mechanism: Mechanism, epsilon: f64, priv_size: usize, infer_size: usize, rep: u64) -> PipelineConfig {
    let p = &cfg.pipeline;
    PipelineConfig {
        mechanism,
        epsilon,
        epsilon_post: p.epsilon_post,
        priv_size,
        infer_size,
        local_hidden: p.local_hidden.clone(),
        train: p.train.clone(),
        seeds: SeedTriple::from_master(cfg.seed, rep),
        query_batch: p.query_batch,
    }
}

/// One pipeline run inside a command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub repetition: u64,
    pub priv_seed: u64,
    pub report: RunReport,
}

/// A cell key: mechanism, epsilon, priv size, infer size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub priv_size: usize,
    pub infer_size: usize,
}

/// Mean and sample standard deviation over repetitions of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub priv_size: usize,
    pub infer_size: usize,
    pub runs: usize,
    pub sidp_mean: f64,
    pub sidp_std: f64,
    pub acc_priv_mean: f64,
    pub acc_priv_std: f64,
    pub acc_val_mean: f64,
    pub acc_val_std: f64,
    /// Paired t-test of local accuracy on the private set against SIDP.
    pub test: Option<PairedTTest>,
}

impl CellSummary {
    fn from_runs(cell: Cell, runs: &[&RunRecord]) -> Result<Self> {
        let col = |f: fn(&RunReport) -> f64| runs.iter().map(|r| f(&r.report)).collect::<Vec<_>>();
        let (sidp, priv_, val) = (col(|r| r.sidp_acc), col(|r| r.local_acc_priv), col(|r| r.local_acc_val));
        let test = if runs.len() >= 2 {
            Some(stats::paired_t_test(&priv_, &sidp)?)
        } else {
            None
        };
        let sd = |xs: &[f64]| if xs.len() >= 2 { stats::std_dev(xs) } else { 0.0 };
        Ok(Self {
            mechanism: cell.mechanism,
            epsilon: cell.epsilon,
            priv_size: cell.priv_size,
            infer_size: cell.infer_size,
            runs: runs.len(),
            sidp_mean: stats::mean(&sidp),
            sidp_std: sd(&sidp),
            acc_priv_mean: stats::mean(&priv_),
            acc_priv_std: sd(&priv_),
            acc_val_mean: stats::mean(&val),
            acc_val_std: sd(&val),
            test,
        })
    }

    fn csv_row(&self, master_seed: u64) -> Vec<String> {
        vec![
            self.mechanism.to_string(),
            num(self.epsilon),
            self.priv_size.to_string(),
            self.infer_size.to_string(),
            self.runs.to_string(),
            num(self.sidp_mean),
            num(self.sidp_std),
            num(self.acc_priv_mean),
            num(self.acc_priv_std),
            num(self.acc_val_mean),
            num(self.acc_val_std),
            p_cell(self.test.as_ref()),
            master_seed.to_string(),
        ]
    }
}

fn p_cell(test: Option<&PairedTTest>) -> String {
    match test.and_then(|t| t.p_value()) {
        Some(p) => format!("{p:.6e}"),
        None => "n/a".into(),
    }
}

/// Runs every `(cell, repetition)` job. Jobs run on the rayon pool; results
/// come back in job order regardless of completion order.
fn run_cells(cfg: &ExperimentConfig, lab: &Lab, cells: &[Cell]) -> Result<Vec<RunRecord>> {
    let jobs: Vec<(Cell, u64)> = cells
        .iter()
        .flat_map(|&c| (0..cfg.repetitions as u64).map(move |r| (c, r)))
        .collect();
    jobs.par_iter()
        .map(|&(c, rep)| {
            let d_priv = lab.priv_set(cfg, c.priv_size, rep).stage("priv-sample")?;
            let pc = pipeline_config(cfg, c.mechanism, c.epsilon, c.priv_size, c.infer_size, rep);
            let report = transfer::run_pipeline(&pc, &d_priv, &lab.val, &lab.oracle)?;
            info!(
                "{} eps={} priv={} infer={} rep={}: sidp {:.3} -> local {:.3}",
                c.mechanism, c.epsilon, c.priv_size, c.infer_size, rep, report.sidp_acc, report.local_acc_priv
            );
            Ok(RunRecord {
                repetition: rep,
                priv_seed: priv_seed(cfg.seed, if cfg.vary_priv_subset { rep } else { 0 }),
                report,
            })
        })
        .collect()
}

fn summarize(cells: &[Cell], runs: &[RunRecord], reps: usize) -> Result<Vec<CellSummary>> {
    cells
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let group: Vec<&RunRecord> = runs[k * reps..(k + 1) * reps].iter().collect();
            CellSummary::from_runs(c, &group)
        })
        .collect()
}

fn run_file_name(r: &RunRecord) -> String {
    let p = &r.report;
    format!(
        "{}_eps{}_priv{}_infer{}_rep{}.json",
        p.mechanism,
        output::eps_tag(p.epsilon),
        p.priv_size,
        p.infer_size,
        r.repetition
    )
}

fn write_runs(out: &OutputDir, cfg: &ExperimentConfig, command: &str, runs: &[RunRecord]) -> Result<()> {
    for r in runs {
        out.write_json(
            &format!("runs/{}", run_file_name(r)),
            &Artifact {
                command,
                master_seed: cfg.seed,
                config: cfg,
                data: r,
            },
        )?;
    }
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let p = &r.report;
            vec![
                p.mechanism.to_string(),
                num(p.epsilon),
                p.priv_size.to_string(),
                p.infer_size.to_string(),
                r.repetition.to_string(),
                num(p.sidp_acc),
                num(p.local_acc_priv),
                num(p.local_acc_val),
            ]
        })
        .collect();
    out.write_csv(&format!("plots/{command}_runs.csv"), &output::RUN_PLOT_HEADER, &rows)?;
    Ok(())
}

fn write_pipeline_summary(out: &OutputDir, cfg: &ExperimentConfig, summaries: &[CellSummary]) -> Result<()> {
    let rows: Vec<Vec<String>> = summaries.iter().map(|s| s.csv_row(cfg.seed)).collect();
    out.write_csv("summary.csv", &output::PIPELINE_SUMMARY_HEADER, &rows)?;
    Ok(())
}

fn prepare(cfg: &ExperimentConfig) -> Result<(OutputDir, Lab)> {
    cfg.validate().stage("config")?;
    let out = OutputDir::create(&cfg.out).stage("output")?;
    out.write_text("config.toml", &cfg.to_toml_string()?).stage("output")?;
    let lab = Lab::prepare(cfg)?;
    Ok((out, lab))
}

fn calibrate(cfg: &ExperimentConfig, lab: &Lab) -> Result<Calibration> {
    let d_priv = lab.priv_set(cfg, cfg.pipeline.priv_size, 0).stage("priv-sample")?;
    let band = cfg
        .calibration
        .band
        .unwrap_or_else(|| transfer::default_band(lab.num_classes()));
    let cal = transfer::calibrate_epsilon(
        &lab.oracle,
        &d_priv,
        band,
        &cfg.calibration.grid,
        seed::derive(cfg.seed, CALIBRATION_STREAM, 0),
    )
    .stage("calibrate")?;
    info!("calibrated epsilon {} (SIDP {:.3})", cal.epsilon, cal.sidp_acc);
    Ok(cal)
}

/// The configured epsilons, or the calibrated one if none are configured.
fn resolve_epsilons(cfg: &ExperimentConfig, lab: &Lab) -> Result<(Vec<f64>, Option<Calibration>)> {
    if cfg.pipeline.epsilons.is_empty() {
        let cal = calibrate(cfg, lab)?;
        Ok((vec![cal.epsilon], Some(cal)))
    } else {
        Ok((cfg.pipeline.epsilons.clone(), None))
    }
}

/// Picks the calibrated epsilon and writes its report.
pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<Calibration> {
    let (out, lab) = prepare(cfg)?;
    let cal = calibrate(cfg, &lab)?;
    out.write_csv(
        "summary.csv",
        &output::CALIBRATION_SUMMARY_HEADER,
        &[vec![
            num(cal.epsilon),
            num(cal.sidp_acc),
            num(cal.band.0),
            num(cal.band.1),
            num(cal.band_position),
            cfg.seed.to_string(),
        ]],
    )?;
    let rows: Vec<Vec<String>> = cal.measured.iter().map(|&(e, a)| vec![num(e), num(a)]).collect();
    out.write_csv("plots/calibration.csv", &["epsilon", "sidp_acc"], &rows)?;
    out.write_json(
        "runs/calibrate.json",
        &Artifact {
            command: "calibrate",
            master_seed: cfg.seed,
            config: cfg,
            data: &cal,
        },
    )?;
    Ok(cal)
}

/// Sup against Rand at one epsilon, paired by repetition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MechanismContrast {
    pub epsilon: f64,
    pub sup_mean: f64,
    pub rand_mean: f64,
    pub test: Option<PairedTTest>,
    /// One-sided p-value for "Sup beats Rand".
    pub p_sup_greater: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub calibration: Option<Calibration>,
    pub cells: Vec<CellSummary>,
    pub contrasts: Vec<MechanismContrast>,
    pub runs: Vec<RunRecord>,
}

/// Every listed mechanism at every epsilon, repeated, with SIDP as baseline.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    let (out, lab) = prepare(cfg)?;
    let (epsilons, calibration) = resolve_epsilons(cfg, &lab)?;
    let p = &cfg.pipeline;
    let cells: Vec<Cell> = p
        .mechanisms
        .iter()
        .flat_map(|&mechanism| {
            epsilons.iter().map(move |&epsilon| Cell {
                mechanism,
                epsilon,
                priv_size: p.priv_size,
                infer_size: cfg.scaled(p.infer_size),
            })
        })
        .collect();
    let runs = run_cells(cfg, &lab, &cells)?;
    let summaries = summarize(&cells, &runs, cfg.repetitions).stage("summarize")?;

    let accs = |m: Mechanism, e: f64| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.report.mechanism == m && r.report.epsilon == e)
            .map(|r| r.report.local_acc_priv)
            .collect()
    };
    let mut contrasts = vec![];
    if p.mechanisms.contains(&Mechanism::Sup) && p.mechanisms.contains(&Mechanism::Rand) {
        for &e in &epsilons {
            let (s, r) = (accs(Mechanism::Sup, e), accs(Mechanism::Rand, e));
            let test = if s.len() >= 2 {
                Some(stats::paired_t_test(&s, &r).stage("summarize")?)
            } else {
                None
            };
            contrasts.push(MechanismContrast {
                epsilon: e,
                sup_mean: stats::mean(&s),
                rand_mean: stats::mean(&r),
                p_sup_greater: test.as_ref().map(|t| t.p_greater()),
                test,
            });
        }
    }

    write_pipeline_summary(&out, cfg, &summaries)?;
    write_runs(&out, cfg, "compare", &runs)?;
    let report = CompareReport {
        calibration,
        cells: summaries,
        contrasts,
        runs,
    };
    out.write_json(
        "report.json",
        &Artifact {
            command: "compare",
            master_seed: cfg.seed,
            config: cfg,
            data: &report,
        },
    )?;
    Ok(report)
}

/// A grid cell that could not run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedCell {
    pub priv_size: usize,
    pub infer_size: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub epsilon: f64,
    pub calibration: Option<Calibration>,
    pub cells: Vec<CellSummary>,
    pub skipped: Vec<SkippedCell>,
    /// Per mechanism and priv size: is mean accuracy non-decreasing in infer size?
    pub monotone_in_infer: Vec<(Mechanism, usize, bool)>,
    /// Per mechanism and infer size: max minus min mean accuracy across priv sizes.
    pub priv_spread: Vec<(Mechanism, usize, f64)>,
    pub runs: Vec<RunRecord>,
}

/// Tolerance for "non-decreasing" between adjacent infer sizes.
pub const MONOTONE_TOLERANCE: f64 = 0.02;

/// `true` when every adjacent step drops by at most `tolerance`.
pub fn non_decreasing_within(values: &[f64], tolerance: f64) -> bool {
    values.windows(2).all(|w| w[1] >= w[0] - tolerance)
}

/// Max minus min; 0 for fewer than two values.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.len() < 2 {
        0.0
    } else {
        max - min
    }
}

/// Accuracy over the `priv_sizes x infer_sizes` grid at one epsilon.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let s = &cfg.sweep;
    if s.priv_sizes.is_empty() || s.infer_sizes.is_empty() || s.mechanisms.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()).at_stage("config"));
    }
    let (out, lab) = prepare(cfg)?;
    let (epsilons, calibration) = resolve_epsilons(cfg, &lab)?;
    let epsilon = epsilons[0];
    if epsilons.len() > 1 {
        warn!("sweep uses only the first epsilon {epsilon}");
    }
    let infer_sizes: Vec<usize> = s.infer_sizes.iter().map(|&k| cfg.scaled(k)).collect();
    let mut cells = vec![];
    let mut skipped = vec![];
    for &mechanism in &s.mechanisms {
        for &priv_size in &s.priv_sizes {
            for &infer_size in &infer_sizes {
                let reason = if !valid_cell(priv_size, infer_size) {
                    Some(format!("infer size exceeds {} candidate pairs", priv_size * priv_size.saturating_sub(1)))
                } else if priv_size % lab.num_classes() != 0 || priv_size > lab.pool.len() {
                    Some(format!("priv size cannot be drawn balanced from a pool of {}", lab.pool.len()))
                } else {
                    None
                };
                match reason {
                    Some(reason) => {
                        warn!("skipping cell priv={priv_size} infer={infer_size}: {reason}");
                        if mechanism == s.mechanisms[0] {
                            skipped.push(SkippedCell {
                                priv_size,
                                infer_size,
                                reason,
                            });
                        }
                    }
                    None => cells.push(Cell {
                        mechanism,
                        epsilon,
                        priv_size,
                        infer_size,
                    }),
                }
            }
        }
    }
    let runs = run_cells(cfg, &lab, &cells)?;
    let summaries = summarize(&cells, &runs, cfg.repetitions).stage("summarize")?;

    let mean_of = |m: Mechanism, ps: usize, inf: usize| {
        summaries
            .iter()
            .find(|c| c.mechanism == m && c.priv_size == ps && c.infer_size == inf)
            .map(|c| c.acc_priv_mean)
    };
    let mut monotone_in_infer = vec![];
    let mut priv_spread = vec![];
    for &m in &s.mechanisms {
        for &ps in &s.priv_sizes {
            let row: Vec<f64> = infer_sizes.iter().filter_map(|&k| mean_of(m, ps, k)).collect();
            if row.len() >= 2 {
                monotone_in_infer.push((m, ps, non_decreasing_within(&row, MONOTONE_TOLERANCE)));
            }
        }
        for &k in &infer_sizes {
            let col: Vec<f64> = s.priv_sizes.iter().filter_map(|&ps| mean_of(m, ps, k)).collect();
            if col.len() >= 2 {
                priv_spread.push((m, k, spread(&col)));
            }
        }
    }

    write_pipeline_summary(&out, cfg, &summaries)?;
    write_runs(&out, cfg, "sweep", &runs)?;
    let mut header = vec!["mechanism".to_string(), "priv_size".to_string()];
    header.extend(infer_sizes.iter().map(|k| format!("infer_{k}")));
    let mut matrix = vec![];
    for &m in &s.mechanisms {
        for &ps in &s.priv_sizes {
            let mut row = vec![m.to_string(), ps.to_string()];
            row.extend(
                infer_sizes
                    .iter()
                    .map(|&k| mean_of(m, ps, k).map(num).unwrap_or_else(|| "skipped".into())),
            );
            matrix.push(row);
        }
    }
    out.write_csv("plots/sweep_matrix.csv", &header, &matrix)?;

    let report = SweepReport {
        epsilon,
        calibration,
        cells: summaries,
        skipped,
        monotone_in_infer,
        priv_spread,
        runs,
    };
    out.write_json(
        "report.json",
        &Artifact {
            command: "sweep",
            master_seed: cfg.seed,
            config: cfg,
            data: &report,
        },
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendReport {
    pub mechanism: Mechanism,
    pub calibration: Option<Calibration>,
    pub rows: Vec<TrendRow>,
    pub low_confidence: bool,
    /// Gap at the largest epsilon is at least the gap at the smallest.
    pub gap_grows_with_epsilon: bool,
    pub runs: Vec<RunRecord>,
}

/// The trend epsilons: configured values, or the calibrated epsilon times
/// each multiplier. Sorted ascending.
fn trend_epsilons(cfg: &ExperimentConfig, lab: &Lab) -> Result<(Vec<f64>, Option<Calibration>)> {
    let t = &cfg.trend;
    let (mut eps, cal) = if !t.epsilons.is_empty() {
        (t.epsilons.clone(), None)
    } else {
        let cal = calibrate(cfg, lab)?;
        (t.multipliers.iter().map(|m| cal.epsilon * m).collect(), Some(cal))
    };
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    Ok((eps, cal))
}

/// Private-minus-validation accuracy gap across epsilons.
pub fn cmd_trend(cfg: &ExperimentConfig) -> Result<TrendReport> {
    let (out, lab) = prepare(cfg)?;
    let (epsilons, calibration) = trend_epsilons(cfg, &lab)?;
    if epsilons.len() < 3 {
        return Err(Error::Size(format!("a trend needs at least 3 distinct epsilons, got {}", epsilons.len()))
            .at_stage("config"));
    }
    let p = &cfg.pipeline;
    let cells: Vec<Cell> = epsilons
        .iter()
        .map(|&epsilon| Cell {
            mechanism: cfg.trend.mechanism,
            epsilon,
            priv_size: p.priv_size,
            infer_size: cfg.scaled(p.infer_size),
        })
        .collect();
    let runs = run_cells(cfg, &lab, &cells)?;
    let summaries = summarize(&cells, &runs, cfg.repetitions).stage("summarize")?;
    let rows: Vec<TrendRow> = summaries
        .iter()
        .map(|s| TrendRow {
            epsilon: s.epsilon,
            sidp_acc: s.sidp_mean,
            acc_priv: s.acc_priv_mean,
            acc_val: s.acc_val_mean,
            gap: s.acc_priv_mean - s.acc_val_mean,
            runs: s.runs,
        })
        .collect();
    let gap_grows_with_epsilon = rows.last().expect("3 rows").gap >= rows[0].gap;

    write_pipeline_summary(&out, cfg, &summaries)?;
    write_runs(&out, cfg, "trend", &runs)?;
    let plot: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.epsilon),
                num(r.sidp_acc),
                num(r.acc_priv),
                num(r.acc_val),
                num(r.gap),
                r.runs.to_string(),
            ]
        })
        .collect();
    out.write_csv("plots/trend.csv", &output::TREND_PLOT_HEADER, &plot)?;
    let report = TrendReport {
        mechanism: cfg.trend.mechanism,
        calibration,
        rows,
        low_confidence: cfg.repetitions < 3,
        gap_grows_with_epsilon,
        runs,
    };
    out.write_json(
        "report.json",
        &Artifact {
            command: "trend",
            master_seed: cfg.seed,
            config: cfg,
            data: &report,
        },
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentReport {
    pub epsilon: f64,
    pub calibration: Option<Calibration>,
    pub records: Vec<TripletRecord>,
    pub triplets_with_dr_gt_1: usize,
    pub total_triplets: usize,
    /// Share of non-degenerate triplets with DR > 1.
    pub frequency: f64,
    pub degenerate: usize,
    pub notes: Vec<String>,
}

/// Drops triplets that repeat an earlier one as a set of classes.
pub fn dedupe_triplets(triplets: &[[usize; 3]]) -> (Vec<[usize; 3]>, Vec<String>) {
    let mut seen = BTreeSet::new();
    let mut kept = vec![];
    let mut notes = vec![];
    for t in triplets {
        let mut key = *t;
        key.sort_unstable();
        if seen.insert(key) {
            kept.push(*t);
        } else {
            notes.push(format!("duplicate triplet {t:?} dropped"));
        }
    }
    (kept, notes)
}

/// Latent studies over configured and random class triplets.
pub fn cmd_latent(cfg: &ExperimentConfig) -> Result<LatentReport> {
    let l = &cfg.latent;
    if l.triplets.is_empty() && l.random == 0 {
        return Err(Error::Config("latent needs explicit triplets or random > 0".into()).at_stage("config"));
    }
    let (out, lab) = prepare(cfg)?;
    let (epsilon, calibration) = match l.epsilon {
        Some(e) => (e, None),
        None => {
            let cal = calibrate(cfg, &lab)?;
            (cal.epsilon, Some(cal))
        }
    };
    let c = lab.num_classes();
    let mut all = l.triplets.clone();
    if l.random > 0 {
        let available = c * c.saturating_sub(1) * c.saturating_sub(2) / 6;
        let extra = latent::random_triplets(c, l.random.min(available), seed::derive(cfg.seed, LATENT_STREAM, 0))
            .stage("latent")?;
        all.extend(extra);
    }
    let (triplets, notes) = dedupe_triplets(&all);
    for n in &notes {
        warn!("{n}");
    }
    let d = sample_balanced_priv(&lab.pool, l.per_class * c, seed::derive(cfg.seed, LATENT_STREAM, 1))
        .stage("priv-sample")?;

    let studies = triplets
        .par_iter()
        .enumerate()
        .map(|(k, &t)| {
            let sc = StudyConfig {
                epsilon,
                epsilon_post: cfg.pipeline.epsilon_post,
                cluster_size: l.cluster_size,
                noise_copies: l.noise_copies,
                grid: l.grid,
                smoothing: latent::DEFAULT_SMOOTHING,
                encoder: l.encoder.clone(),
                seed: seed::derive(cfg.seed, LATENT_STREAM, 100 + k as u64),
            };
            latent::triplet_study(&d, TripletDesign::standard(t), &sc)
        })
        .collect::<Result<Vec<_>>>()
        .stage("latent")?;

    for s in &studies {
        let [a, b, cc] = s.record.design.classes;
        let tag = format!("latent_{a}_{b}_{cc}");
        out.write_json(
            &format!("runs/{tag}.json"),
            &Artifact {
                command: "latent",
                master_seed: cfg.seed,
                config: cfg,
                data: &s.record,
            },
        )?;
        s.embedding.write_csv(&out.path(&format!("plots/{tag}.csv")))?;
    }
    let records: Vec<TripletRecord> = studies.into_iter().map(|s| s.record).collect();
    let degenerate = records.iter().filter(|r| r.ratio.is_degenerate()).count();
    let above = records.iter().filter(|r| r.ratio.sup_closer() == Some(true)).count();
    let scored = records.len() - degenerate;
    let frequency = if scored > 0 { above as f64 / scored as f64 } else { 0.0 };
    out.write_csv(
        "summary.csv",
        &output::LATENT_SUMMARY_HEADER,
        &[vec![
            above.to_string(),
            records.len().to_string(),
            num(frequency),
            degenerate.to_string(),
            cfg.seed.to_string(),
        ]],
    )?;
    let report = LatentReport {
        epsilon,
        calibration,
        total_triplets: records.len(),
        records,
        triplets_with_dr_gt_1: above,
        frequency,
        degenerate,
        notes,
    };
    out.write_json(
        "report.json",
        &Artifact {
            command: "latent",
            master_seed: cfg.seed,
            config: cfg,
            data: &report,
        },
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderReport {
    pub epsilons: Vec<f64>,
    pub files: Vec<String>,
}

/// Writes one PGM grid per epsilon: rows are clean, base-noised, Rand and
/// Sup versions of the same private images.
pub fn cmd_render_samples(cfg: &ExperimentConfig) -> Result<RenderReport> {
    let (out, lab) = prepare(cfg)?;
    let epsilons = if cfg.render.epsilons.is_empty() {
        vec![calibrate(cfg, &lab)?.epsilon]
    } else {
        cfg.render.epsilons.clone()
    };
    let count = cfg.render.count.max(2);
    let d_priv = lab.priv_set(cfg, cfg.pipeline.priv_size, 0).stage("priv-sample")?;
    if d_priv.len() < count {
        return Err(Error::Size(format!("cannot render {count} of {} images", d_priv.len())).at_stage("render"));
    }
    std::fs::create_dir_all(out.path("samples")).map_err(|e| Error::io(out.path("samples"), e))?;
    let mut files = vec![];
    let mut rows = vec![];
    for (k, &eps) in epsilons.iter().enumerate() {
        let spec = NoiseSpec::per_pixel(eps).stage("render")?;
        let post = NoiseSpec::per_pixel(cfg.pipeline.epsilon_post.unwrap_or(eps)).stage("render")?;
        let mut rng = seed::rng(seed::derive(cfg.seed, RENDER_STREAM, k as u64));
        let base: Vec<_> = (0..count)
            .map(|i| noise::add_base_noise(&d_priv.images()[i], i, &spec, &mut rng))
            .collect();
        let rand = base
            .iter()
            .map(|p| noise::rand_post_process(p, &post, &mut rng))
            .collect::<Result<Vec<_>>>()
            .stage("render")?;
        let sup = (0..count)
            .map(|i| noise::sup_combine(&base[i], &base[(i + 1) % count]))
            .collect::<Result<Vec<_>>>()
            .stage("render")?;
        let mut grid: Vec<&crate::data::ImageTensor> = d_priv.images()[..count].iter().collect();
        grid.extend(base.iter().map(|p| p.pixels()));
        grid.extend(rand.iter().map(|p| p.pixels()));
        grid.extend(sup.iter().map(|p| p.pixels()));
        let name = format!("samples/eps_{}.pgm", output::eps_tag(eps));
        noise::write_pgm_grid(&grid, count, &out.path(&name)).stage("render")?;
        rows.push(vec![num(eps), name.clone(), "4".into(), count.to_string(), cfg.seed.to_string()]);
        files.push(name);
    }
    out.write_csv("summary.csv", &output::RENDER_SUMMARY_HEADER, &rows)?;
    let report = RenderReport { epsilons, files };
    out.write_json(
        "runs/render-samples.json",
        &Artifact {
            command: "render-samples",
            master_seed: cfg.seed,
            config: cfg,
            data: &report,
        },
    )?;
    Ok(report)
}
