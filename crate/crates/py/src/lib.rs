//! Python bindings. Results that carry many fields come back as plain dicts.

use ldpkit_core::data::{self, LabeledDataset, SplitPlan, SyntheticSpec};
use ldpkit_core::experiments::{self, ExperimentConfig};
use ldpkit_core::latent::{self, Bounds, ClusterHistogram};
use ldpkit_core::nn::TrainConfig;
use ldpkit_core::noise::{self, Mechanism, NoiseSpec};
use ldpkit_core::oracle::{self, LabelOracle, RemoteConfig, RemoteOracle};
use ldpkit_core::seed::SeedTriple;
use ldpkit_core::transfer::{self, PipelineConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: ldpkit_core::Error) -> PyErr {
    match e {
        ldpkit_core::Error::Io { .. } | ldpkit_core::Error::Stage { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn mechanism(name: &str) -> PyResult<Mechanism> {
    match name.to_ascii_lowercase().as_str() {
        "sup" => Ok(Mechanism::Sup),
        "rand" => Ok(Mechanism::Rand),
        other => Err(PyValueError::new_err(format!("unknown mechanism {other:?}; use \"sup\" or \"rand\""))),
    }
}

/// An ordered set of labeled images with pixels in [0, 1].
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// Class-template synthetic data.
    #[staticmethod]
    #[pyo3(signature = (num_classes=10, per_class=500, height=8, width=8, seed=0))]
    fn synthetic(num_classes: usize, per_class: usize, height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec {
            num_classes,
            per_class,
            height,
            width,
            seed,
            ..SyntheticSpec::default()
        };
        Ok(Self {
            inner: data::make_synthetic(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load_idx(images: &str, labels: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_idx(images, labels).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn images(&self) -> Vec<Vec<f64>> {
        self.inner.images().iter().map(|im| im.pixels().to_vec()).collect()
    }

    /// Disjoint `(remote_train, priv_pool, val)` partitions.
    fn split(&self, remote_train: usize, priv_pool: usize, val: usize, seed: u64) -> PyResult<(Self, Self, Self)> {
        let plan = SplitPlan {
            remote_train_count: remote_train,
            priv_pool_count: priv_pool,
            val_count: val,
            priv_size: 0,
            seed,
        };
        let (a, b, c) = data::split(&self.inner, &plan).map_err(err)?;
        Ok((Self { inner: a }, Self { inner: b }, Self { inner: c }))
    }

    /// A class-balanced draw of `size` items.
    fn balanced(&self, size: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::sample_balanced_priv(&self.inner, size, seed).map_err(err)?,
        })
    }
}

/// The remote model. It only ever labels noised images.
#[pyclass(name = "Oracle", frozen)]
struct PyOracle {
    inner: RemoteOracle,
}

#[pymethods]
impl PyOracle {
    #[staticmethod]
    #[pyo3(signature = (train, hidden=vec![256, 128], epochs=15, learning_rate=0.05, batch_size=32, seed=0))]
    fn fit(
        py: Python<'_>,
        train: &PyDataset,
        hidden: Vec<usize>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = RemoteConfig {
            hidden,
            train: TrainConfig {
                learning_rate,
                epochs,
                batch_size,
                seed,
            },
        };
        let inner = py.detach(|| oracle::fit_remote(&train.inner, &cfg)).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn query_count(&self) -> u64 {
        self.inner.query_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Accuracy of the oracle's labels on a base-noised copy of `d_priv`.
    fn sidp_accuracy(&self, py: Python<'_>, d_priv: &PyDataset, epsilon: f64, seed: u64) -> PyResult<f64> {
        let spec = NoiseSpec::per_pixel(epsilon).map_err(err)?;
        let protected = noise::protect_dataset(&d_priv.inner, &spec, seed);
        py.detach(|| oracle::sidp_accuracy(&self.inner, &protected, d_priv.inner.labels()))
            .map_err(err)
    }
}

/// Laplace scale `sensitivity / epsilon`.
#[pyfunction]
#[pyo3(signature = (epsilon, sensitivity=1.0))]
fn laplace_scale(epsilon: f64, sensitivity: f64) -> PyResult<f64> {
    noise::laplace_scale(epsilon, sensitivity).map_err(err)
}

/// `count` Laplace draws at budget `epsilon`.
#[pyfunction]
fn sample_laplace(epsilon: f64, count: usize, seed: u64) -> PyResult<Vec<f64>> {
    let spec = NoiseSpec::per_pixel(epsilon).map_err(err)?;
    noise::sample_laplace(&spec, &mut ldpkit_core::seed::rng(seed), count).map_err(err)
}

/// Base-noised pixels of every image, clamped to [0, 1].
#[pyfunction]
fn protect(dataset: &PyDataset, epsilon: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec = NoiseSpec::per_pixel(epsilon).map_err(err)?;
    Ok(noise::protect_dataset(&dataset.inner, &spec, seed)
        .iter()
        .map(|p| p.pixels().pixels().to_vec())
        .collect())
}

/// One knowledge-transfer run; returns the run report as a dict.
#[pyfunction]
#[pyo3(signature = (oracle, d_priv, d_val, mechanism, epsilon, infer_size, seed=0, local_hidden=vec![64], epochs=15))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline<'py>(
    py: Python<'py>,
    oracle: &PyOracle,
    d_priv: &PyDataset,
    d_val: &PyDataset,
    mechanism: &str,
    epsilon: f64,
    infer_size: usize,
    seed: u64,
    local_hidden: Vec<usize>,
    epochs: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = PipelineConfig::new(self::mechanism(mechanism)?, epsilon, d_priv.inner.len(), infer_size);
    cfg.local_hidden = local_hidden;
    cfg.train.epochs = epochs;
    cfg.seeds = SeedTriple::from_master(seed, 0);
    let report = py
        .detach(|| transfer::run_pipeline(&cfg, &d_priv.inner, &d_val.inner, &oracle.inner))
        .map_err(err)?;
    to_py(py, &report)
}

/// Smallest epsilon of a descending grid whose SIDP accuracy lands in `band`.
#[pyfunction]
#[pyo3(signature = (oracle, d_priv, grid, band=None, seed=0))]
fn calibrate_epsilon<'py>(
    py: Python<'py>,
    oracle: &PyOracle,
    d_priv: &PyDataset,
    grid: Vec<f64>,
    band: Option<(f64, f64)>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let band = band.unwrap_or_else(|| transfer::default_band(oracle.inner.num_classes()));
    let cal = py
        .detach(|| transfer::calibrate_epsilon(&oracle.inner, &d_priv.inner, band, &grid, seed))
        .map_err(err)?;
    to_py(py, &cal)
}

fn histograms(clusters: &[&[[f64; 2]]], grid: usize) -> PyResult<Vec<ClusterHistogram>> {
    let bounds = Bounds::enclosing(clusters).map_err(err)?;
    clusters
        .iter()
        .map(|c| ClusterHistogram::from_points(c, grid, bounds, latent::DEFAULT_SMOOTHING).map_err(err))
        .collect()
}

/// KL(p || q) between two 2-D point clouds binned on a shared grid.
#[pyfunction]
#[pyo3(signature = (p, q, grid=32))]
fn kl_divergence(p: Vec<[f64; 2]>, q: Vec<[f64; 2]>, grid: usize) -> PyResult<f64> {
    let h = histograms(&[&p, &q], grid)?;
    latent::kl_divergence(&h[0], &h[1]).map_err(err)
}

/// KL(target || rand) / KL(target || sup); `None` when the denominator is zero.
#[pyfunction]
#[pyo3(signature = (target, rand, sup, grid=32))]
fn divergence_ratio(target: Vec<[f64; 2]>, rand: Vec<[f64; 2]>, sup: Vec<[f64; 2]>, grid: usize) -> PyResult<Option<f64>> {
    let h = histograms(&[&target, &rand, &sup], grid)?;
    Ok(latent::divergence_ratio(&h[0], &h[1], &h[2]).map_err(err)?.value())
}

/// Runs a CLI command (`calibrate`, `compare`, `sweep`, `trend`, `latent`,
/// `render-samples`) from a TOML config string and returns its report.
#[pyfunction]
#[pyo3(signature = (command, config="", seed=None, out=None, scale=None))]
fn run_command<'py>(
    py: Python<'py>,
    command: &str,
    config: &str,
    seed: Option<u64>,
    out: Option<std::path::PathBuf>,
    scale: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = ExperimentConfig::from_toml_str(config).map_err(err)?;
    cfg.apply(&experiments::Overrides { seed, out, scale });
    let text = py
        .detach(|| -> ldpkit_core::Result<String> {
            let v = match command {
                "calibrate" => serde_json::to_string(&experiments::cmd_calibrate(&cfg)?),
                "compare" => serde_json::to_string(&experiments::cmd_compare(&cfg)?),
                "sweep" => serde_json::to_string(&experiments::cmd_sweep(&cfg)?),
                "trend" => serde_json::to_string(&experiments::cmd_trend(&cfg)?),
                "latent" => serde_json::to_string(&experiments::cmd_latent(&cfg)?),
                "render-samples" => serde_json::to_string(&experiments::cmd_render_samples(&cfg)?),
                other => return Err(ldpkit_core::Error::Config(format!("unknown command {other:?}"))),
            };
            Ok(v?)
        })
        .map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pymodule(name = "ldpkit")]
fn ldpkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyOracle>()?;
    m.add_function(wrap_pyfunction!(laplace_scale, m)?)?;
    m.add_function(wrap_pyfunction!(sample_laplace, m)?)?;
    m.add_function(wrap_pyfunction!(protect, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
