//! A small dense-network engine: ReLU MLPs, softmax cross-entropy,
//! mini-batch SGD, and a finite-difference gradient check.
//!
//! Weights are stored row-major as `output_dim x input_dim`. All arithmetic
//! is `f64` so the gradient check is meaningful at `h = 1e-5`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::seed;

pub const CHECKPOINT_FORMAT: &str = "ldpkit-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

impl AsRef<[f64]> for ImageTensor {
    fn as_ref(&self) -> &[f64] {
        self.pixels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl DenseLayer {
    pub fn new(
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
        input_dim: usize,
        output_dim: usize,
    ) -> Result<Self> {
        if weights.len() != input_dim * output_dim {
            return Err(Error::Shape {
                expected: input_dim * output_dim,
                actual: weights.len(),
            });
        }
        if biases.len() != output_dim {
            return Err(Error::Shape {
                expected: output_dim,
                actual: biases.len(),
            });
        }
        Ok(Self {
            weights,
            biases,
            activation,
            input_dim,
            output_dim,
        })
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.input_dim..(o + 1) * self.input_dim]
    }
}

/// Parameters of a feed-forward classifier or encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<DenseLayer>,
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn from_rows<T: AsRef<[f64]>>(rows: &[T], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-layer gradients, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &ModelParams) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            axpy(1.0, b, a);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            axpy(1.0, b, a);
        }
    }
}

/// Activations kept from a forward pass for backpropagation.
/// `outputs[0]` is the input batch; `outputs[k + 1]` is layer `k`'s output.
pub struct ForwardCache {
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("cache holds at least the input")
    }
}

/// He-uniform weights, zero biases. Hidden layers use ReLU, the last layer
/// is linear.
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<ModelParams> {
    if layer_dims.len() < 2 {
        return Err(Error::Size(format!(
            "a model needs at least an input and an output dimension, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Size(format!("zero-width layer in {layer_dims:?}")));
    }
    let mut rng = seed::rng(seed);
    let last = layer_dims.len() - 2;
    let layers = layer_dims
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let activation = if k == last {
                Activation::Identity
            } else {
                Activation::ReLU
            };
            DenseLayer::new(weights, vec![0.0; fan_out], activation, fan_in, fan_out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams { layers })
}

impl ModelParams {
    /// Assembles a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Size("a model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim != w[1].input_dim {
                return Err(Error::Shape {
                    expected: w[0].output_dim,
                    actual: w[1].input_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.output_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    fn param_mut(&mut self, layer: usize, is_weight: bool, idx: usize) -> &mut f64 {
        let l = &mut self.layers[layer];
        if is_weight {
            &mut l.weights[idx]
        } else {
            &mut l.biases[idx]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    fn forward_matrix(&self, x: Matrix) -> ForwardCache {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x);
        for layer in &self.layers {
            let input = outputs.last().expect("non-empty");
            let mut out = Matrix::zeros(input.rows, layer.output_dim);
            for s in 0..input.rows {
                let xs = input.row(s);
                let ys = out.row_mut(s);
                for (o, y) in ys.iter_mut().enumerate() {
                    let z = dot(layer.row(o), xs) + layer.biases[o];
                    *y = match layer.activation {
                        Activation::ReLU => z.max(0.0),
                        Activation::Identity => z,
                    };
                }
            }
            outputs.push(out);
        }
        ForwardCache { outputs }
    }

    /// Forward pass keeping intermediate activations.
    pub fn forward_cached<T: AsRef<[f64]>>(&self, batch: &[T]) -> Result<ForwardCache> {
        Ok(self.forward_matrix(Matrix::from_rows(batch, self.input_dim())?))
    }

    /// Logits for a batch, one row per input.
    pub fn forward<T: AsRef<[f64]>>(&self, batch: &[T]) -> Result<Matrix> {
        let mut cache = self.forward_cached(batch)?;
        Ok(cache.outputs.pop().expect("non-empty"))
    }

    /// Backpropagates `grad_out` (d loss / d output) through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_out.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.outputs[k];
            let output = &cache.outputs[k + 1];
            if layer.activation == Activation::ReLU {
                for (d, y) in delta.data.iter_mut().zip(&output.data) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let gw = &mut grads.weights[k];
            let gb = &mut grads.biases[k];
            let mut next = if k > 0 {
                Some(Matrix::zeros(input.rows, layer.input_dim))
            } else {
                None
            };
            for s in 0..input.rows {
                let xs = input.row(s);
                let ds = delta.row(s);
                for (o, &d) in ds.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    axpy(d, xs, &mut gw[o * layer.input_dim..(o + 1) * layer.input_dim]);
                    if let Some(n) = next.as_mut() {
                        axpy(d, layer.row(o), n.row_mut(s));
                    }
                }
            }
            if let Some(n) = next {
                delta = n;
            }
        }
        grads
    }

    /// Plain SGD step: `p -= lr * g`.
    pub fn apply(&mut self, grads: &Gradients, learning_rate: f64) {
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            axpy(-learning_rate, gw, &mut layer.weights);
            axpy(-learning_rate, gb, &mut layer.biases);
        }
    }

    /// Hard labels for a batch.
    pub fn predict<T: AsRef<[f64]> + Sync>(&self, batch: &[T]) -> Result<Vec<usize>> {
        let dim = self.input_dim();
        if let Some(bad) = batch.iter().find(|x| x.as_ref().len() != dim) {
            return Err(Error::Shape {
                expected: dim,
                actual: bad.as_ref().len(),
            });
        }
        Ok(batch
            .par_chunks(256)
            .flat_map_iter(|chunk| {
                let logits = self.forward(chunk).expect("dimensions checked");
                (0..logits.rows)
                    .map(|r| predict_hard(logits.row(r)))
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: self.dims(),
            layers: self.layers.clone(),
        };
        let text = serde_json::to_string(&ck)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let layers = ck
            .layers
            .into_iter()
            .map(|l| DenseLayer::new(l.weights, l.biases, l.activation, l.input_dim, l.output_dim))
            .collect::<Result<Vec<_>>>()?;
        let model = Self::from_layers(layers)?;
        if model.dims() != ck.dims {
            return Err(Error::Validation("checkpoint dims disagree with layers".into()));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    dims: Vec<usize>,
    layers: Vec<DenseLayer>,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict_hard(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy of `logits` against `labels`, with the
/// gradient of that mean with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let z = logits.row(r);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let log_sum = sum.ln() + m;
        loss += log_sum - z[label];
        for (g, v) in grad.row_mut(r).iter_mut().zip(z) {
            *g = (v - log_sum).exp() / n;
        }
        grad.row_mut(r)[label] -= 1.0 / n;
    }
    (loss / n, grad)
}

/// Mean cross-entropy of a model on a labeled batch.
pub fn loss<T: AsRef<[f64]>>(model: &ModelParams, inputs: &[T], labels: &[usize]) -> Result<f64> {
    let logits = model.forward(inputs)?;
    Ok(softmax_cross_entropy(&logits, labels).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 15,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Domain {
                param: "learning_rate",
                expected: "a non-negative finite number",
                value: self.learning_rate,
            });
        }
        if self.epochs == 0 {
            return Err(Error::Size("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Size("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Trains `model` with shuffled mini-batch SGD on softmax cross-entropy.
/// Returns the trained parameters and the mean training loss of each epoch.
pub fn train<T: AsRef<[f64]>>(
    model: &ModelParams,
    inputs: &[T],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: inputs.len(),
            labels: labels.len(),
        });
    }
    check_labels(labels, model.output_dim())?;
    let dim = model.input_dim();
    if let Some(bad) = inputs.iter().find(|x| x.as_ref().len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: bad.as_ref().len(),
        });
    }

    let mut params = model.clone();
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut batch = Matrix::zeros(cfg.batch_size, dim);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.rows = chunk.len();
            batch.data.clear();
            batch_labels.clear();
            for &i in chunk {
                batch.data.extend_from_slice(inputs[i].as_ref());
                batch_labels.push(labels[i]);
            }
            let cache = params.forward_matrix(batch.clone());
            let (l, g) = softmax_cross_entropy(cache.output(), &batch_labels);
            total += l * chunk.len() as f64;
            let grads = params.backward(&cache, &g);
            params.apply(&grads, cfg.learning_rate);
        }
        if !params.is_finite() {
            return Err(Error::Degenerate(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        trace.push(total / inputs.len() as f64);
    }
    Ok((params, trace))
}

/// Fraction of `inputs` whose predicted label equals `labels`.
pub fn accuracy<T: AsRef<[f64]> + Sync>(
    model: &ModelParams,
    inputs: &[T],
    labels: &[usize],
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: inputs.len(),
            labels: labels.len(),
        });
    }
    let pred = model.predict(inputs)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / inputs.len() as f64)
}

/// Location of a single parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParamCoord {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<ParamCoord>,
    pub checked: usize,
    /// Every coordinate whose error exceeded the tolerance.
    pub violations: Vec<(ParamCoord, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// `|a - n| / max(|a| + |n|, floor)`; the floor keeps parameters with an
/// exactly-zero gradient from dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backprop gradients of the mean cross-entropy with central finite
/// differences on every parameter.
pub fn grad_check<T: AsRef<[f64]>>(
    model: &ModelParams,
    inputs: &[T],
    labels: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_labels(labels, model.output_dim())?;
    let cache = model.forward_cached(inputs)?;
    let (_, g) = softmax_cross_entropy(cache.output(), labels);
    let analytic = model.backward(&cache, &g);

    let h = GRAD_CHECK_STEP;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        violations: Vec::new(),
    };
    let numeric = |probe: &mut ModelParams, layer: usize, is_weight: bool, idx: usize| -> Result<f64> {
        let orig = *probe.param_mut(layer, is_weight, idx);
        *probe.param_mut(layer, is_weight, idx) = orig + h;
        let up = loss(probe, inputs, labels)?;
        *probe.param_mut(layer, is_weight, idx) = orig - h;
        let down = loss(probe, inputs, labels)?;
        *probe.param_mut(layer, is_weight, idx) = orig;
        Ok((up - down) / (2.0 * h))
    };

    for (k, layer) in model.layers.iter().enumerate() {
        for idx in 0..layer.weights.len() {
            let n = numeric(&mut probe, k, true, idx)?;
            let coord = ParamCoord::Weight {
                layer: k,
                row: idx / layer.input_dim,
                col: idx % layer.input_dim,
            };
            record(&mut report, coord, analytic.weights[k][idx], n, tolerance);
        }
        for idx in 0..layer.biases.len() {
            let n = numeric(&mut probe, k, false, idx)?;
            let coord = ParamCoord::Bias { layer: k, index: idx };
            record(&mut report, coord, analytic.biases[k][idx], n, tolerance);
        }
    }
    Ok(report)
}

fn record(report: &mut GradCheckReport, coord: ParamCoord, a: f64, n: f64, tolerance: f64) {
    let err = relative_error(a, n);
    report.checked += 1;
    if err > report.max_relative_error || report.worst.is_none() {
        report.max_relative_error = report.max_relative_error.max(err);
        report.worst = Some(coord);
    }
    if err > tolerance {
        report.violations.push((coord, err));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(n: usize) -> ModelParams {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        ModelParams::from_layers(vec![DenseLayer::new(
            w,
            vec![0.0; n],
            Activation::Identity,
            n,
            n,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn init_shapes_determinism_and_errors() {
        let m = init_model(&[64, 32, 10], 1).unwrap();
        assert_eq!(m.layers()[0].weights.len(), 32 * 64);
        assert_eq!(m.layers()[1].weights.len(), 10 * 32);
        assert_eq!(m.layers()[0].activation, Activation::ReLU);
        assert_eq!(m.layers()[1].activation, Activation::Identity);
        assert!(m.layers().iter().all(|l| l.biases.iter().all(|b| *b == 0.0)));
        assert_eq!(m, init_model(&[64, 32, 10], 1).unwrap());
        assert!(init_model(&[64, 0, 10], 1).is_err());
        assert!(init_model(&[64], 1).is_err());
        let limit = (6.0f64 / 64.0).sqrt();
        assert!(m.layers()[0].weights.iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn forward_zero_identity_and_batching() {
        let mut m = init_model(&[3, 4, 2], 0).unwrap();
        for l in &mut m.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let out = m.forward(&[vec![0.3, 0.2, 0.9]]).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));

        let id = identity_layer(3);
        let x = vec![0.1, 0.7, 0.4];
        assert_eq!(id.forward(std::slice::from_ref(&x)).unwrap().data, x);

        let r = init_model(&[3, 5, 2], 4).unwrap();
        let a = vec![0.1, 0.2, 0.3];
        let b = vec![0.9, 0.5, 0.0];
        let both = r.forward(&[a.clone(), b.clone()]).unwrap();
        let mut separate = r.forward(&[a]).unwrap().data;
        separate.extend(r.forward(&[b]).unwrap().data);
        assert_eq!(both.data, separate);

        assert!(matches!(r.forward(&[vec![0.0; 4]]), Err(Error::Shape { .. })));
    }

    #[test]
    fn argmax_rule() {
        assert_eq!(predict_hard(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(predict_hard(&[0.5, 0.5]), 0);
        let z = [0.2, -1.0, 3.0, 2.9];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.5).collect();
        assert_eq!(predict_hard(&z), predict_hard(&shifted));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let logits = Matrix {
            rows: 2,
            cols: 4,
            data: vec![0.7; 8],
        };
        let (l, _) = softmax_cross_entropy(&logits, &[0, 3]);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let m = init_model(&[2, 4, 2], 3).unwrap();
        let xs = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 1,
            seed: 1,
        };
        let (trained, _) = train(&m, &xs, &[0, 1], &cfg).unwrap();
        for (a, b) in trained.layers().iter().zip(m.layers()) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.weights), bits(&b.weights));
            assert_eq!(bits(&a.biases), bits(&b.biases));
        }
    }

    #[test]
    fn train_errors() {
        let m = init_model(&[2, 2], 0).unwrap();
        let cfg = TrainConfig::default();
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(train(&m, &empty, &[], &cfg), Err(Error::EmptyDataset)));
        assert!(matches!(
            train(&m, &[vec![0.0, 0.0]], &[2], &cfg),
            Err(Error::LabelOutOfRange { .. })
        ));
        let bad = TrainConfig {
            epochs: 0,
            ..cfg
        };
        assert!(train(&m, &[vec![0.0, 0.0]], &[0], &bad).is_err());
    }

    #[test]
    fn zero_model_bias_gradients_match() {
        let mut m = init_model(&[3, 3, 3], 0).unwrap();
        for l in &mut m.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let xs = vec![vec![0.0; 3]; 4];
        let report = grad_check(&m, &xs, &[0, 1, 2, 1], 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn grad_check_reports_offending_coordinate() {
        let m = init_model(&[2, 3, 2], 7).unwrap();
        let xs = vec![vec![0.3, 0.8], vec![0.9, 0.1]];
        // A negative tolerance flags every coordinate.
        let report = grad_check(&m, &xs, &[0, 1], -1.0).unwrap();
        assert_eq!(report.violations.len(), m.num_params());
        assert!(matches!(
            report.violations[0].0,
            ParamCoord::Weight { layer: 0, row: 0, col: 0 }
        ));
        assert!(report.worst.is_some());
    }

    #[test]
    fn accuracy_contracts() {
        let id = identity_layer(2);
        let xs = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(accuracy(&id, &xs, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&id, &xs, &[1, 1]).unwrap(), 0.5);
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(accuracy(&id, &empty, &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let m = init_model(&[5, 7, 3], 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back = ModelParams::load(&p).unwrap();
        for (a, b) in back.layers().iter().zip(m.layers()) {
            assert!(a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, m);
    }
}
