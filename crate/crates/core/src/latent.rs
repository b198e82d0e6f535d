//! Latent-space comparison of Sup and Rand noise clusters.
//!
//! A small encoder is trained with a triplet margin loss on noised samples of
//! three classes. Clean samples, Sup combinations and Rand noisings are then
//! embedded in 2-D, summarised by centroids and grid histograms, and compared
//! through the KL divergence ratio `KL(T || R) / KL(T || S)`.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{init_model, Matrix, ModelParams};
use crate::noise::{self, NoiseSpec, ProtectedImage};
use crate::seed;

pub const DEFAULT_GRID: usize = 32;
pub const DEFAULT_SMOOTHING: f64 = 1e-6;
pub const DEFAULT_MARGIN: f64 = 1.0;

const DIST_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusterTag {
    ClassA,
    ClassB,
    ClassC,
    SupCluster,
    RandCluster,
}

impl ClusterTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterTag::ClassA => "class_a",
            ClusterTag::ClassB => "class_b",
            ClusterTag::ClassC => "class_c",
            ClusterTag::SupCluster => "sup",
            ClusterTag::RandCluster => "rand",
        }
    }

    pub const CLASSES: [ClusterTag; 3] = [ClusterTag::ClassA, ClusterTag::ClassB, ClusterTag::ClassC];
}

/// Tagged 2-D points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    points: Vec<[f64; 2]>,
    tags: Vec<ClusterTag>,
}

impl Embedding2D {
    pub fn new(points: Vec<[f64; 2]>, tags: Vec<ClusterTag>) -> Result<Self> {
        if points.len() != tags.len() {
            return Err(Error::Validation(format!(
                "{} points but {} tags",
                points.len(),
                tags.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Validation(format!("non-finite embedding point {p:?}")));
        }
        Ok(Self { points, tags })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn tags(&self) -> &[ClusterTag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cluster(&self, tag: ClusterTag) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .zip(&self.tags)
            .filter(|(_, t)| **t == tag)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Points of the three clean classes.
    pub fn target(&self) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .zip(&self.tags)
            .filter(|(_, t)| ClusterTag::CLASSES.contains(t))
            .map(|(p, _)| *p)
            .collect()
    }

    /// Writes `x,y,tag` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "tag"])?;
        for (p, t) in self.points.iter().zip(&self.tags) {
            w.write_record([p[0].to_string(), p[1].to_string(), t.as_str().to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    /// Smallest box holding every point of every cluster. Flat extents are
    /// widened to unit length so every point lands in a bin.
    pub fn enclosing(clusters: &[&[[f64; 2]]]) -> Result<Self> {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in clusters.iter().flat_map(|c| c.iter()) {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        if !min[0].is_finite() || !max[0].is_finite() {
            return Err(Error::Validation("bounds need at least one finite point".into()));
        }
        for d in 0..2 {
            if max[d] - min[d] <= 0.0 {
                min[d] -= 0.5;
                max[d] += 0.5;
            }
        }
        Ok(Self { min, max })
    }
}

/// Normalised, smoothed 2-D histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterHistogram {
    shape: [usize; 2],
    bins: Vec<f64>,
    bounds: Bounds,
    smoothing: f64,
}

impl ClusterHistogram {
    /// Bins `points` on a `grid x grid` lattice over `bounds`.
    pub fn from_points(points: &[[f64; 2]], grid: usize, bounds: Bounds, smoothing: f64) -> Result<Self> {
        if grid == 0 {
            return Err(Error::Size("histogram grid must be at least 1".into()));
        }
        if points.is_empty() {
            return Err(Error::Validation("cannot build a histogram of an empty cluster".into()));
        }
        let mut counts = vec![0.0; grid * grid];
        for p in points {
            let mut cell = [0usize; 2];
            for d in 0..2 {
                let span = bounds.max[d] - bounds.min[d];
                let t = ((p[d] - bounds.min[d]) / span * grid as f64).floor();
                if !(t >= 0.0 && p[d] <= bounds.max[d]) {
                    return Err(Error::Validation(format!("point {p:?} lies outside the histogram bounds")));
                }
                cell[d] = (t as usize).min(grid - 1);
            }
            counts[cell[1] * grid + cell[0]] += 1.0;
        }
        Self::from_weights(counts, [grid, grid], bounds, smoothing)
    }

    /// Normalises nonnegative weights, adds `smoothing` to every bin and
    /// normalises again.
    pub fn from_weights(weights: Vec<f64>, shape: [usize; 2], bounds: Bounds, smoothing: f64) -> Result<Self> {
        if weights.len() != shape[0] * shape[1] || weights.is_empty() {
            return Err(Error::Shape {
                expected: shape[0] * shape[1],
                actual: weights.len(),
            });
        }
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::Domain {
                param: "smoothing",
                expected: "finite and > 0",
                value: smoothing,
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Validation("histogram weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Validation("histogram weights sum to zero".into()));
        }
        let smoothed: Vec<f64> = weights.iter().map(|w| w / total + smoothing).collect();
        let z: f64 = smoothed.iter().sum();
        Ok(Self {
            shape,
            bins: smoothed.into_iter().map(|b| b / z).collect(),
            bounds,
            smoothing,
        })
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }
}

/// `sum P log(P / Q)` over a shared grid.
pub fn kl_divergence(p: &ClusterHistogram, q: &ClusterHistogram) -> Result<f64> {
    if p.shape != q.shape || p.bounds != q.bounds {
        return Err(Error::Validation(format!(
            "histogram grids differ: {:?} over {:?} vs {:?} over {:?}",
            p.shape, p.bounds, q.shape, q.bounds
        )));
    }
    if p.bins == q.bins {
        return Ok(0.0);
    }
    let d: f64 = p
        .bins
        .iter()
        .zip(&q.bins)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum();
    // Rounding can push a tiny divergence just below zero.
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceRatio {
    Finite { value: f64 },
    /// `KL(T || S)` is zero.
    Degenerate { numerator: f64 },
}

impl DivergenceRatio {
    pub fn value(&self) -> Option<f64> {
        match self {
            DivergenceRatio::Finite { value } => Some(*value),
            DivergenceRatio::Degenerate { .. } => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, DivergenceRatio::Degenerate { .. })
    }

    /// `Some(true)` when Sup is strictly closer to the target than Rand.
    pub fn sup_closer(&self) -> Option<bool> {
        self.value().map(|v| v > 1.0)
    }
}

/// `KL(T || R) / KL(T || S)`.
pub fn divergence_ratio(
    target: &ClusterHistogram,
    rand: &ClusterHistogram,
    sup: &ClusterHistogram,
) -> Result<DivergenceRatio> {
    let numerator = kl_divergence(target, rand)?;
    let denominator = kl_divergence(target, sup)?;
    if denominator == 0.0 {
        return Ok(DivergenceRatio::Degenerate { numerator });
    }
    Ok(DivergenceRatio::Finite {
        value: numerator / denominator,
    })
}

pub fn centroid(points: &[[f64; 2]]) -> Result<[f64; 2]> {
    if points.is_empty() {
        return Err(Error::Validation("centroid of an empty cluster".into()));
    }
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    Ok([sx / n, sy / n])
}

pub fn centroid_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    let (ca, cb) = (centroid(a)?, centroid(b)?);
    Ok(((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            latent_dim: 2,
            margin: DEFAULT_MARGIN,
            learning_rate: 0.01,
            steps: 1500,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Size("encoder layer widths must be at least 1".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Domain {
                param: "margin",
                expected: "finite and >= 0",
                value: self.margin,
            });
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain {
                param: "learning_rate",
                expected: "finite and >= 0",
                value: self.learning_rate,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Size("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean triplet margin loss `max(0, d(a,p) - d(a,n) + margin)` and its
/// gradients with respect to the three embedding batches.
pub fn triplet_margin_loss(
    anchors: &Matrix,
    positives: &Matrix,
    negatives: &Matrix,
    margin: f64,
) -> (f64, [Matrix; 3]) {
    let b = anchors.rows;
    let mut grads = [
        Matrix::zeros(b, anchors.cols),
        Matrix::zeros(b, anchors.cols),
        Matrix::zeros(b, anchors.cols),
    ];
    let mut total = 0.0;
    for s in 0..b {
        let (fa, fp, fn_) = (anchors.row(s), positives.row(s), negatives.row(s));
        let (dap, dan) = (dist(fa, fp), dist(fa, fn_));
        let l = dap - dan + margin;
        if l <= 0.0 {
            continue;
        }
        total += l;
        for k in 0..anchors.cols {
            let gp = if dap > DIST_FLOOR { (fa[k] - fp[k]) / dap } else { 0.0 };
            let gn = if dan > DIST_FLOOR { (fa[k] - fn_[k]) / dan } else { 0.0 };
            grads[0].row_mut(s)[k] = (gp - gn) / b as f64;
            grads[1].row_mut(s)[k] = -gp / b as f64;
            grads[2].row_mut(s)[k] = gn / b as f64;
        }
    }
    (total / b as f64, grads)
}

/// Mean triplet loss of `encoder` over explicit triples.
pub fn triplet_loss<T: AsRef<[f64]>>(
    encoder: &ModelParams,
    anchors: &[T],
    positives: &[T],
    negatives: &[T],
    margin: f64,
) -> Result<f64> {
    let (a, p, n) = (
        encoder.forward(anchors)?,
        encoder.forward(positives)?,
        encoder.forward(negatives)?,
    );
    Ok(triplet_margin_loss(&a, &p, &n, margin).0)
}

/// Trains an MLP encoder with batch-random triplet mining: the positive
/// shares the anchor's class, the negative does not.
pub fn train_triplet_encoder<T: AsRef<[f64]>>(
    samples: &[T],
    labels: &[usize],
    cfg: &EncoderConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    if samples.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: samples.len(),
            labels: labels.len(),
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 3 {
        return Err(Error::Validation(format!(
            "triplet encoder needs at least 3 classes, found {}",
            classes.len()
        )));
    }
    let by_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    if let Some((c, _)) = classes.iter().zip(&by_class).find(|(_, m)| m.len() < 2) {
        return Err(Error::Validation(format!("class {c} needs at least 2 samples")));
    }
    let slot: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("class listed"))
        .collect();

    let dim = samples[0].as_ref().len();
    let mut dims = vec![dim];
    dims.extend(&cfg.hidden);
    dims.push(cfg.latent_dim);
    let mut model = init_model(&dims, seed::derive(cfg.seed, 0, 0))?;
    let mut rng = seed::rng(seed::derive(cfg.seed, 0, 1));

    let (mut a_idx, mut p_idx, mut n_idx) = (vec![], vec![], vec![]);
    for _ in 0..cfg.steps {
        a_idx.clear();
        p_idx.clear();
        n_idx.clear();
        for _ in 0..cfg.batch_size {
            let a = rng.random_range(0..samples.len());
            let own = &by_class[slot[a]];
            let p = loop {
                let p = own[rng.random_range(0..own.len())];
                if p != a {
                    break p;
                }
            };
            let other = (slot[a] + rng.random_range(1..classes.len())) % classes.len();
            let n = by_class[other][rng.random_range(0..by_class[other].len())];
            a_idx.push(samples[a].as_ref());
            p_idx.push(samples[p].as_ref());
            n_idx.push(samples[n].as_ref());
        }
        let ca = model.forward_cached(&a_idx)?;
        let cp = model.forward_cached(&p_idx)?;
        let cn = model.forward_cached(&n_idx)?;
        let (_, [ga, gp, gn]) = triplet_margin_loss(ca.output(), cp.output(), cn.output(), cfg.margin);
        let mut grads = model.backward(&ca, &ga);
        grads.add_assign(&model.backward(&cp, &gp));
        grads.add_assign(&model.backward(&cn, &gn));
        model.apply(&grads, cfg.learning_rate);
        if !model.is_finite() {
            return Err(Error::Degenerate("triplet encoder parameters became non-finite".into()));
        }
    }
    Ok(model)
}

/// Encodes each sample to a 2-D point.
pub fn embed<T: AsRef<[f64]>>(encoder: &ModelParams, samples: &[T]) -> Result<Vec<[f64; 2]>> {
    if encoder.output_dim() != 2 {
        return Err(Error::Shape {
            expected: 2,
            actual: encoder.output_dim(),
        });
    }
    let out = encoder.forward(samples)?;
    Ok((0..out.rows).map(|r| [out.row(r)[0], out.row(r)[1]]).collect())
}

/// Mean within-class and between-class pairwise latent distances.
pub fn separation(points: &[[f64; 2]], labels: &[usize]) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dist(&points[i], &points[j]);
            if labels[i] == labels[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

/// Which classes form a study and which of them feed the noisy clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletDesign {
    pub classes: [usize; 3],
    /// Classes of the two Sup operands; may repeat.
    pub sup_pair: (usize, usize),
    pub rand_class: usize,
}

impl TripletDesign {
    /// Sup over the first two classes, Rand on the first.
    pub fn standard(classes: [usize; 3]) -> Self {
        Self {
            classes,
            sup_pair: (classes[0], classes[1]),
            rand_class: classes[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.classes;
        if a == b || b == c || a == c {
            return Err(Error::Validation(format!("triplet classes must be distinct: {:?}", self.classes)));
        }
        for k in [self.sup_pair.0, self.sup_pair.1, self.rand_class] {
            if !self.classes.contains(&k) {
                return Err(Error::Validation(format!("class {k} is not part of triplet {:?}", self.classes)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub epsilon: f64,
    /// Second-layer budget for Rand; defaults to `epsilon`.
    pub epsilon_post: Option<f64>,
    /// Points in each of the Sup and Rand clusters.
    pub cluster_size: usize,
    /// Noise draws per clean sample in the encoder training set.
    pub noise_copies: usize,
    pub grid: usize,
    pub smoothing: f64,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl StudyConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            epsilon_post: None,
            cluster_size: 300,
            noise_copies: 4,
            grid: DEFAULT_GRID,
            smoothing: DEFAULT_SMOOTHING,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub design: TripletDesign,
    pub epsilon: f64,
    pub seed: u64,
    /// Centroid distances from the Sup cluster to classes a, b, c.
    pub sup_distances: [f64; 3],
    /// Centroid distances from the Rand cluster to classes a, b, c.
    pub rand_distances: [f64; 3],
    pub kl_target_rand: f64,
    pub kl_target_sup: f64,
    pub ratio: DivergenceRatio,
    /// Mean latent distances on fresh noise draws: within class, between classes.
    pub held_out_separation: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct TripletStudy {
    pub record: TripletRecord,
    pub embedding: Embedding2D,
}

/// Runs one latent study: trains the encoder on noised triplet samples,
/// embeds the clean classes, a Sup cluster and a Rand cluster, and compares
/// them.
pub fn triplet_study(d_priv: &LabeledDataset, design: TripletDesign, cfg: &StudyConfig) -> Result<TripletStudy> {
    design.validate()?;
    if cfg.cluster_size == 0 || cfg.noise_copies == 0 {
        return Err(Error::Size("cluster size and noise copies must be at least 1".into()));
    }
    let base = NoiseSpec::per_pixel(cfg.epsilon)?;
    let post = NoiseSpec::per_pixel(cfg.epsilon_post.unwrap_or(cfg.epsilon))?;
    let members: Vec<Vec<usize>> = design
        .classes
        .iter()
        .map(|&c| (0..d_priv.len()).filter(|&i| d_priv.labels()[i] == c).collect())
        .collect();
    if let Some(k) = (0..3).find(|&k| members[k].is_empty()) {
        return Err(Error::Validation(format!("class {} is absent", design.classes[k])));
    }
    let slot = |c: usize| design.classes.iter().position(|&x| x == c).expect("validated");
    let images = d_priv.images();

    // Encoder training data: several base-noise draws of every triplet sample.
    let mut train_rng = seed::rng(seed::derive(cfg.seed, 20, 0));
    let (mut train_x, mut train_y) = (vec![], vec![]);
    for _ in 0..cfg.noise_copies {
        for (k, m) in members.iter().enumerate() {
            for &i in m {
                train_x.push(noise::add_base_noise(&images[i], i, &base, &mut train_rng));
                train_y.push(k);
            }
        }
    }
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.latent_dim = 2;
    enc_cfg.seed = seed::derive(cfg.seed, 21, 0);
    let encoder = train_triplet_encoder(&train_x, &train_y, &enc_cfg)?;

    let mut held_rng = seed::rng(seed::derive(cfg.seed, 22, 0));
    let (mut held_x, mut held_y) = (vec![], vec![]);
    for (k, m) in members.iter().enumerate() {
        for &i in m {
            held_x.push(noise::add_base_noise(&images[i], i, &base, &mut held_rng));
            held_y.push(k);
        }
    }
    let held_out_separation = separation(&embed(&encoder, &held_x)?, &held_y);

    // One base-noised release of each triplet sample feeds both mechanisms.
    let mut base_rng = seed::rng(seed::derive(cfg.seed, 23, 0));
    let protected: Vec<Vec<ProtectedImage>> = members
        .iter()
        .map(|m| {
            m.iter()
                .map(|&i| noise::add_base_noise(&images[i], i, &base, &mut base_rng))
                .collect()
        })
        .collect();

    let (sa, sb) = (&protected[slot(design.sup_pair.0)], &protected[slot(design.sup_pair.1)]);
    let pairs: Vec<(usize, usize)> = (0..sa.len())
        .flat_map(|i| (0..sb.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| sa[i].source_index() != sb[j].source_index())
        .collect();
    if pairs.len() < cfg.cluster_size {
        return Err(Error::Size(format!(
            "only {} Sup pairs available for a cluster of {}",
            pairs.len(),
            cfg.cluster_size
        )));
    }
    let mut pick_rng = seed::rng(seed::derive(cfg.seed, 24, 0));
    let mut chosen = index::sample(&mut pick_rng, pairs.len(), cfg.cluster_size).into_vec();
    chosen.sort_unstable();
    let sup: Vec<ProtectedImage> = chosen
        .iter()
        .map(|&k| noise::sup_combine(&sa[pairs[k].0], &sb[pairs[k].1]))
        .collect::<Result<_>>()?;

    let rsrc = &protected[slot(design.rand_class)];
    let mut rand_rng = seed::rng(seed::derive(cfg.seed, 25, 0));
    let rand: Vec<ProtectedImage> = (0..cfg.cluster_size)
        .map(|k| noise::rand_post_process(&rsrc[k % rsrc.len()], &post, &mut rand_rng))
        .collect::<Result<_>>()?;

    let mut points = vec![];
    let mut tags = vec![];
    for (k, m) in members.iter().enumerate() {
        let clean: Vec<_> = m.iter().map(|&i| &images[i]).collect();
        points.extend(embed(&encoder, &clean)?);
        tags.extend(std::iter::repeat_n(ClusterTag::CLASSES[k], m.len()));
    }
    points.extend(embed(&encoder, &sup)?);
    tags.extend(std::iter::repeat_n(ClusterTag::SupCluster, sup.len()));
    points.extend(embed(&encoder, &rand)?);
    tags.extend(std::iter::repeat_n(ClusterTag::RandCluster, rand.len()));
    let embedding = Embedding2D::new(points, tags)?;

    let target = embedding.target();
    let sup_pts = embedding.cluster(ClusterTag::SupCluster);
    let rand_pts = embedding.cluster(ClusterTag::RandCluster);
    let mut sup_distances = [0.0; 3];
    let mut rand_distances = [0.0; 3];
    for (k, tag) in ClusterTag::CLASSES.iter().enumerate() {
        let class_pts = embedding.cluster(*tag);
        sup_distances[k] = centroid_distance(&sup_pts, &class_pts)?;
        rand_distances[k] = centroid_distance(&rand_pts, &class_pts)?;
    }

    let bounds = Bounds::enclosing(&[&target, &sup_pts, &rand_pts])?;
    let h_t = ClusterHistogram::from_points(&target, cfg.grid, bounds, cfg.smoothing)?;
    let h_s = ClusterHistogram::from_points(&sup_pts, cfg.grid, bounds, cfg.smoothing)?;
    let h_r = ClusterHistogram::from_points(&rand_pts, cfg.grid, bounds, cfg.smoothing)?;

    let record = TripletRecord {
        design,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        sup_distances,
        rand_distances,
        kl_target_rand: kl_divergence(&h_t, &h_r)?,
        kl_target_sup: kl_divergence(&h_t, &h_s)?,
        ratio: divergence_ratio(&h_t, &h_r, &h_s)?,
        held_out_separation,
    };
    Ok(TripletStudy { record, embedding })
}

/// Draws `count` distinct class triplets (as sorted sets) from `num_classes`.
pub fn random_triplets(num_classes: usize, count: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    if num_classes < 3 {
        return Err(Error::Size(format!("need at least 3 classes, have {num_classes}")));
    }
    let available = num_classes * (num_classes - 1) * (num_classes - 2) / 6;
    if count > available {
        return Err(Error::Size(format!(
            "asked for {count} distinct triplets, only {available} exist"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let pick = index::sample(&mut rng, num_classes, 3).into_vec();
        let mut key = [pick[0], pick[1], pick[2]];
        key.sort_unstable();
        if seen.insert(key) {
            // Keep the drawn order so the designated classes vary.
            out.push([pick[0], pick[1], pick[2]]);
        }
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_records(records: &[TripletRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::nn::DenseLayer;
    use approx::assert_abs_diff_eq;

    fn unit() -> Bounds {
        Bounds {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        }
    }

    fn two_bin(p: [f64; 2]) -> ClusterHistogram {
        // Smoothing so small it does not move the hand-computed value.
        ClusterHistogram::from_weights(p.to_vec(), [2, 1], unit(), 1e-300).unwrap()
    }

    #[test]
    fn centroid_of_two_points() {
        assert_eq!(centroid(&[[0.0, 0.0], [2.0, 0.0]]).unwrap(), [1.0, 0.0]);
    }

    #[test]
    fn identical_clusters_are_distance_zero() {
        let c = [[0.3, -1.0], [2.0, 5.0]];
        assert_eq!(centroid_distance(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn empty_cluster_is_rejected() {
        assert!(centroid(&[]).is_err());
        assert!(centroid_distance(&[[0.0, 0.0]], &[]).is_err());
    }

    #[test]
    fn kl_two_bin_example() {
        let p = two_bin([0.5, 0.5]);
        let q = two_bin([0.9, 0.1]);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.5108, epsilon = 1e-4);
        let reverse = kl_divergence(&q, &p).unwrap();
        assert!((reverse - expected).abs() > 1e-3);
    }

    #[test]
    fn kl_of_identical_is_exactly_zero() {
        let p = two_bin([0.2, 0.8]);
        assert_eq!(kl_divergence(&p, &p.clone()).unwrap(), 0.0);
    }

    #[test]
    fn kl_rejects_grid_mismatch() {
        let p = two_bin([0.5, 0.5]);
        let q = ClusterHistogram::from_weights(vec![1.0; 4], [2, 2], unit(), 1e-6).unwrap();
        assert!(kl_divergence(&p, &q).is_err());
        let moved = Bounds {
            min: [0.0, 0.0],
            max: [2.0, 1.0],
        };
        let r = ClusterHistogram::from_weights(vec![0.5, 0.5], [2, 1], moved, 1e-300).unwrap();
        assert!(kl_divergence(&p, &r).is_err());
    }

    #[test]
    fn ratio_is_one_when_rand_equals_sup() {
        let t = two_bin([0.5, 0.5]);
        let s = two_bin([0.7, 0.3]);
        assert_eq!(divergence_ratio(&t, &s, &s.clone()).unwrap(), DivergenceRatio::Finite { value: 1.0 });
    }

    #[test]
    fn ratio_flags_sup_equal_to_target() {
        let t = two_bin([0.5, 0.5]);
        let r = two_bin([0.7, 0.3]);
        let dr = divergence_ratio(&t, &r, &t.clone()).unwrap();
        assert!(dr.is_degenerate());
        assert_eq!(dr.sup_closer(), None);
    }

    #[test]
    fn histogram_bins_points_and_normalises() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [0.49, 0.2]];
        let h = ClusterHistogram::from_points(&pts, 2, unit(), 1e-6).unwrap();
        assert_abs_diff_eq!(h.bins().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(h.bins().iter().all(|&b| b > 0.0));
        // Bottom-left holds two points, top-right one, the others only smoothing.
        assert!(h.bins()[0] > h.bins()[3]);
        assert!(h.bins()[3] > h.bins()[1]);
    }

    #[test]
    fn histogram_rejects_out_of_bounds_and_empty() {
        assert!(ClusterHistogram::from_points(&[[1.5, 0.0]], 4, unit(), 1e-6).is_err());
        assert!(ClusterHistogram::from_points(&[], 4, unit(), 1e-6).is_err());
    }

    #[test]
    fn bounds_widen_flat_extent() {
        let b = Bounds::enclosing(&[&[[1.0, 2.0], [1.0, 3.0]]]).unwrap();
        assert_eq!(b.min[0], 0.5);
        assert_eq!(b.max[0], 1.5);
        assert_eq!(b.min[1], 2.0);
    }

    #[test]
    fn zero_encoder_with_zero_margin_has_zero_loss() {
        let layer = DenseLayer::new(vec![0.0; 8], vec![0.0; 2], crate::nn::Activation::Identity, 4, 2).unwrap();
        let enc = ModelParams::from_layers(vec![layer]).unwrap();
        let x = vec![vec![0.1, 0.2, 0.3, 0.4]; 3];
        assert_eq!(triplet_loss(&enc, &x, &x, &x, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        // Loss as a function of the embeddings themselves.
        let a = Matrix {
            rows: 2,
            cols: 2,
            data: vec![0.1, 0.4, -0.3, 0.2],
        };
        let p = Matrix {
            rows: 2,
            cols: 2,
            data: vec![0.5, -0.2, 0.0, 0.9],
        };
        let n = Matrix {
            rows: 2,
            cols: 2,
            data: vec![0.3, 0.3, 0.6, -0.1],
        };
        let (_, grads) = triplet_margin_loss(&a, &p, &n, 1.0);
        let h = 1e-6;
        let mut mats = [a, p, n];
        for which in 0..3 {
            for k in 0..4 {
                let orig = mats[which].data[k];
                mats[which].data[k] = orig + h;
                let up = triplet_margin_loss(&mats[0], &mats[1], &mats[2], 1.0).0;
                mats[which].data[k] = orig - h;
                let down = triplet_margin_loss(&mats[0], &mats[1], &mats[2], 1.0).0;
                mats[which].data[k] = orig;
                assert_abs_diff_eq!(grads[which].data[k], (up - down) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn encoder_requires_three_classes() {
        let x = vec![vec![0.0, 1.0]; 4];
        let err = train_triplet_encoder(&x, &[0, 0, 1, 1], &EncoderConfig::default()).unwrap_err();
        assert!(err.to_string().contains("3 classes"));
    }

    fn fixture() -> LabeledDataset {
        make_synthetic(&SyntheticSpec {
            num_classes: 4,
            per_class: 40,
            height: 4,
            width: 4,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_cfg() -> StudyConfig {
        let mut cfg = StudyConfig::new(2.0);
        cfg.cluster_size = 60;
        cfg.noise_copies = 2;
        cfg.encoder.steps = 200;
        cfg.seed = 9;
        cfg
    }

    #[test]
    fn encoder_is_deterministic() {
        let d = fixture();
        let cfg = EncoderConfig {
            steps: 50,
            seed: 4,
            ..Default::default()
        };
        let a = train_triplet_encoder(d.images(), d.labels(), &cfg).unwrap();
        let b = train_triplet_encoder(d.images(), d.labels(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_separates_classes() {
        let d = fixture();
        let cfg = EncoderConfig {
            steps: 400,
            seed: 1,
            ..Default::default()
        };
        let enc = train_triplet_encoder(d.images(), d.labels(), &cfg).unwrap();
        let held = make_synthetic(&SyntheticSpec {
            num_classes: 4,
            per_class: 20,
            height: 4,
            width: 4,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let (intra, inter) = separation(&embed(&enc, held.images()).unwrap(), held.labels());
        assert!(intra < inter, "intra {intra} inter {inter}");
    }

    #[test]
    fn study_record_shape_and_determinism() {
        let d = fixture();
        let design = TripletDesign::standard([2, 0, 3]);
        let a = triplet_study(&d, design, &small_cfg()).unwrap();
        let b = triplet_study(&d, design, &small_cfg()).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.record.sup_distances.len(), 3);
        assert_eq!(a.record.rand_distances.len(), 3);
        assert_eq!(a.embedding.cluster(ClusterTag::SupCluster).len(), 60);
        assert_eq!(a.embedding.cluster(ClusterTag::RandCluster).len(), 60);
        assert_eq!(a.embedding.target().len(), 120);
    }

    #[test]
    fn study_rejects_absent_class_and_bad_design() {
        let d = fixture();
        assert!(triplet_study(&d, TripletDesign::standard([0, 1, 7]), &small_cfg()).is_err());
        let bad = TripletDesign {
            classes: [0, 1, 2],
            sup_pair: (0, 3),
            rand_class: 0,
        };
        assert!(triplet_study(&d, bad, &small_cfg()).is_err());
        assert!(TripletDesign::standard([0, 0, 1]).validate().is_err());
    }

    #[test]
    fn random_triplets_are_distinct_sets() {
        let t = random_triplets(10, 30, 5).unwrap();
        let mut keys: Vec<_> = t
            .iter()
            .map(|x| {
                let mut k = *x;
                k.sort_unstable();
                k
            })
            .collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 30);
        assert!(random_triplets(4, 5, 0).is_err());
        assert_eq!(random_triplets(10, 30, 5).unwrap(), t);
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let e = Embedding2D::new(vec![[0.0, 1.0], [2.0, 3.0]], vec![ClusterTag::ClassA, ClusterTag::RandCluster]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.csv");
        e.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "x,y,tag\n0,1,class_a\n2,3,rand\n");
    }

    #[test]
    fn embedding_rejects_non_finite_and_mismatch() {
        assert!(Embedding2D::new(vec![[f64::NAN, 0.0]], vec![ClusterTag::ClassA]).is_err());
        assert!(Embedding2D::new(vec![[0.0, 0.0]], vec![]).is_err());
    }
}
