//! Laplace base mechanism and the two post-processing mechanisms that grow a
//! protected query pool.
//!
//! Every private image is noised exactly once ([`add_base_noise`]). All
//! further candidates are functions of those protected images alone: Rand
//! adds a second independent Laplace layer, Sup averages two protected
//! images pixel-wise. Each layer is clamped to `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{quantize, ImageTensor, LabeledDataset};
use crate::error::{Error, Result};
use crate::seed;

/// Privacy budget together with its derived Laplace scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    epsilon: f64,
    sensitivity: f64,
    scale: f64,
}

impl NoiseSpec {
    pub fn new(epsilon: f64, sensitivity: f64) -> Result<Self> {
        let scale = laplace_scale(epsilon, sensitivity)?;
        Ok(Self {
            epsilon,
            sensitivity,
            scale,
        })
    }

    /// Per-pixel spec for images normalized to `[0, 1]` (sensitivity 1).
    pub fn per_pixel(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, 1.0)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// `sensitivity / epsilon`.
pub fn laplace_scale(epsilon: f64, sensitivity: f64) -> Result<f64> {
    // NaN fails both comparisons.
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Domain {
            param: "epsilon",
            expected: "a positive finite number",
            value: epsilon,
        });
    }
    if !(sensitivity > 0.0) || !sensitivity.is_finite() {
        return Err(Error::Domain {
            param: "sensitivity",
            expected: "a positive finite number",
            value: sensitivity,
        });
    }
    Ok(sensitivity / epsilon)
}

/// Density of the zero-centred Laplace distribution with scale `scale`.
pub fn laplace_pdf(z: f64, scale: f64) -> f64 {
    (-z.abs() / scale).exp() / (2.0 * scale)
}

/// One Laplace draw by inversion of the CDF.
#[inline]
pub fn laplace_draw<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let mut u: f64 = rng.random();
    while u == 0.0 {
        u = rng.random();
    }
    if u < 0.5 {
        scale * (2.0 * u).ln()
    } else {
        -scale * (2.0 * (1.0 - u)).ln()
    }
}

/// `count` i.i.d. draws from `Laplace(0, spec.scale())`.
pub fn sample_laplace<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R, count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Size("sample count must be at least 1".into()));
    }
    Ok((0..count).map(|_| laplace_draw(spec.scale, rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseLayer {
    Base,
    RandPost,
    SupPost,
}

/// A noised image. Only this module can construct one, so every value of
/// this type went through the base mechanism.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtectedImage {
    pixels: ImageTensor,
    source_index: usize,
    layer: NoiseLayer,
    pair_index: Option<usize>,
}

impl ProtectedImage {
    pub fn pixels(&self) -> &ImageTensor {
        &self.pixels
    }

    pub fn source_index(&self) -> usize {
        self.source_index
    }

    pub fn layer(&self) -> NoiseLayer {
        self.layer
    }

    pub fn pair_index(&self) -> Option<usize> {
        self.pair_index
    }
}

impl AsRef<[f64]> for ProtectedImage {
    fn as_ref(&self) -> &[f64] {
        self.pixels.pixels()
    }
}

fn noised_clamped<R: Rng + ?Sized>(x: &ImageTensor, scale: f64, rng: &mut R) -> ImageTensor {
    let px = x
        .pixels()
        .iter()
        .map(|&p| (p + laplace_draw(scale, rng)).clamp(0.0, 1.0))
        .collect();
    x.with_pixels(px)
}

/// First noise layer: per-pixel Laplace noise, clamped to `[0, 1]`.
pub fn add_base_noise<R: Rng + ?Sized>(
    x: &ImageTensor,
    source_index: usize,
    spec: &NoiseSpec,
    rng: &mut R,
) -> ProtectedImage {
    ProtectedImage {
        pixels: noised_clamped(x, spec.scale, rng),
        source_index,
        layer: NoiseLayer::Base,
        pair_index: None,
    }
}

/// Base-noises every image of `d_priv` in order from one seeded stream.
pub fn protect_dataset(d_priv: &LabeledDataset, spec: &NoiseSpec, seed: u64) -> Vec<ProtectedImage> {
    let mut rng = seed::rng(seed);
    d_priv
        .images()
        .iter()
        .enumerate()
        .map(|(i, x)| add_base_noise(x, i, spec, &mut rng))
        .collect()
}

/// Rand post-processing: a second independent Laplace layer on a base image.
pub fn rand_post_process<R: Rng + ?Sized>(
    p: &ProtectedImage,
    post_spec: &NoiseSpec,
    rng: &mut R,
) -> Result<ProtectedImage> {
    if p.layer != NoiseLayer::Base {
        return Err(Error::State(format!(
            "rand post-processing needs a base-layer image, got {:?}",
            p.layer
        )));
    }
    Ok(ProtectedImage {
        pixels: noised_clamped(&p.pixels, post_spec.scale, rng),
        source_index: p.source_index,
        layer: NoiseLayer::RandPost,
        pair_index: None,
    })
}

/// Sup post-processing: pixel-wise mean of two base images.
pub fn sup_combine(a: &ProtectedImage, b: &ProtectedImage) -> Result<ProtectedImage> {
    if a.layer != NoiseLayer::Base || b.layer != NoiseLayer::Base {
        return Err(Error::State(format!(
            "superimposition needs two base-layer images, got {:?} and {:?}",
            a.layer, b.layer
        )));
    }
    if a.source_index == b.source_index {
        return Err(Error::Validation(format!(
            "cannot superimpose source {} with itself",
            a.source_index
        )));
    }
    if !a.pixels.same_shape(&b.pixels) {
        return Err(Error::Shape {
            expected: a.pixels.len(),
            actual: b.pixels.len(),
        });
    }
    // The mean of two values in [0, 1] stays in [0, 1].
    let px = a
        .pixels
        .pixels()
        .iter()
        .zip(b.pixels.pixels())
        .map(|(x, y)| (x + y) / 2.0)
        .collect();
    Ok(ProtectedImage {
        pixels: a.pixels.with_pixels(px),
        source_index: a.source_index,
        layer: NoiseLayer::SupPost,
        pair_index: Some(b.source_index),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Rand,
    Sup,
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Rand => "rand",
            Mechanism::Sup => "sup",
        })
    }
}

/// Identity of a candidate: source position plus the partner position (Sup)
/// or the re-noising version (Rand).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateKey {
    pub source: u32,
    pub other: u32,
}

/// The post-processed candidate pool.
///
/// Entries are kept as keys; pixels are materialized on demand from the
/// protected images. Rand candidates draw their second layer from a seed
/// derived from `(post_seed, source, version)`, so any candidate can be
/// rebuilt independently and in any order.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    protected: Arc<[ProtectedImage]>,
    entries: Vec<CandidateKey>,
    mechanism: Mechanism,
    base_spec: NoiseSpec,
    post_spec: NoiseSpec,
    post_seed: u64,
}

/// Builds the full candidate pool of `n(n-1)` items in row-major order.
///
/// `post_spec` is only used by Rand and defaults to `base_spec`.
pub fn build_candidate_set(
    protected: &[ProtectedImage],
    mechanism: Mechanism,
    base_spec: NoiseSpec,
    post_spec: Option<NoiseSpec>,
    post_seed: u64,
) -> Result<CandidateSet> {
    let n = protected.len();
    if n < 2 {
        return Err(Error::Size(format!(
            "candidate construction needs at least 2 protected images, got {n}"
        )));
    }
    if u32::try_from(n).is_err() {
        return Err(Error::Size(format!("{n} protected images is too many")));
    }
    if let Some(p) = protected.iter().find(|p| p.layer != NoiseLayer::Base) {
        return Err(Error::State(format!(
            "candidate construction needs base-layer images, got {:?}",
            p.layer
        )));
    }
    let first = &protected[0].pixels;
    if let Some(p) = protected.iter().find(|p| !p.pixels.same_shape(first)) {
        return Err(Error::Shape {
            expected: first.len(),
            actual: p.pixels.len(),
        });
    }

    let mut entries = Vec::with_capacity(n * (n - 1));
    for i in 0..n as u32 {
        match mechanism {
            Mechanism::Sup => entries.extend(
                (0..n as u32)
                    .filter(|&j| j != i)
                    .map(|j| CandidateKey { source: i, other: j }),
            ),
            Mechanism::Rand => entries.extend(
                (0..(n - 1) as u32).map(|k| CandidateKey { source: i, other: k }),
            ),
        }
    }
    Ok(CandidateSet {
        protected: protected.into(),
        entries,
        mechanism,
        base_spec,
        post_spec: post_spec.unwrap_or(base_spec),
        post_seed,
    })
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mechanism(&self) -> Mechanism {
        self.mechanism
    }

    pub fn base_spec(&self) -> NoiseSpec {
        self.base_spec
    }

    pub fn post_spec(&self) -> NoiseSpec {
        self.post_spec
    }

    pub fn keys(&self) -> &[CandidateKey] {
        &self.entries
    }

    /// The protected images the pool was built from.
    pub fn protected(&self) -> &[ProtectedImage] {
        &self.protected
    }

    fn materialize_key(&self, key: CandidateKey) -> ProtectedImage {
        let src = &self.protected[key.source as usize];
        match self.mechanism {
            Mechanism::Sup => sup_combine(src, &self.protected[key.other as usize])
                .expect("keys only name distinct base images"),
            Mechanism::Rand => {
                let mut rng = seed::rng(seed::derive(
                    self.post_seed,
                    u64::from(key.source),
                    u64::from(key.other),
                ));
                rand_post_process(src, &self.post_spec, &mut rng)
                    .expect("pool only holds base images")
            }
        }
    }

    /// Pixels of the candidate at `idx`.
    pub fn get(&self, idx: usize) -> Option<ProtectedImage> {
        self.entries.get(idx).map(|&k| self.materialize_key(k))
    }

    /// Every candidate, in pool order.
    pub fn materialize(&self) -> Vec<ProtectedImage> {
        self.entries
            .par_iter()
            .map(|&k| self.materialize_key(k))
            .collect()
    }
}

/// Uniform subset of `k` candidates without replacement; pool order is kept.
pub fn select_inference_subset(cand: &CandidateSet, k: usize, seed: u64) -> Result<CandidateSet> {
    if k == 0 || k > cand.len() {
        return Err(Error::Size(format!(
            "inference size {k} outside 1..={}",
            cand.len()
        )));
    }
    let mut picked = index::sample(&mut seed::rng(seed), cand.len(), k).into_vec();
    picked.sort_unstable();
    Ok(CandidateSet {
        protected: Arc::clone(&cand.protected),
        entries: picked.into_iter().map(|i| cand.entries[i]).collect(),
        mechanism: cand.mechanism,
        base_spec: cand.base_spec,
        post_spec: cand.post_spec,
        post_seed: cand.post_seed,
    })
}

/// Writes images side by side as a binary PGM (8-bit, round-half-up).
/// Multi-channel images are averaged to gray.
pub fn write_pgm_grid(images: &[&ImageTensor], columns: usize, path: &Path) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::Size("nothing to render".into()))?;
    let (h, w, ch) = (first.height(), first.width(), first.channels());
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let (gw, gh) = (columns * (w + 1) - 1, rows * (h + 1) - 1);
    let mut canvas = vec![255u8; gw * gh];
    for (n, im) in images.iter().enumerate() {
        if !im.same_shape(first) {
            return Err(Error::Shape {
                expected: first.len(),
                actual: im.len(),
            });
        }
        let (oy, ox) = ((n / columns) * (h + 1), (n % columns) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let gray = (0..ch)
                    .map(|c| im.pixels()[c * h * w + y * w + x])
                    .sum::<f64>()
                    / ch as f64;
                canvas[(oy + y) * gw + ox + x] = quantize(gray);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{gw} {gh}\n255\n")
        .and_then(|_| f.write_all(&canvas))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(px: &[f64]) -> ImageTensor {
        ImageTensor::from_flat(px.to_vec()).unwrap()
    }

    fn base(px: &[f64], idx: usize) -> ProtectedImage {
        // ε = 1e12 is noise-free to double precision for these tests.
        let spec = NoiseSpec::per_pixel(1e12).unwrap();
        let p = add_base_noise(&img(px), idx, &spec, &mut seed::rng(0));
        ProtectedImage {
            pixels: img(px),
            ..p
        }
    }

    #[test]
    fn scale_formula_and_domain_errors() {
        assert_eq!(laplace_scale(2.0, 1.0).unwrap(), 0.5);
        assert_eq!(laplace_scale(1.25, 1.0).unwrap(), 0.8);
        match laplace_scale(0.0, 1.0) {
            Err(Error::Domain { param, .. }) => assert_eq!(param, "epsilon"),
            other => panic!("{other:?}"),
        }
        match laplace_scale(1.0, -1.0) {
            Err(Error::Domain { param, .. }) => assert_eq!(param, "sensitivity"),
            other => panic!("{other:?}"),
        }
        assert!(laplace_scale(f64::NAN, 1.0).is_err());
        let s = NoiseSpec::new(4.0, 2.0).unwrap();
        assert_eq!(s.scale(), s.sensitivity() / s.epsilon());
    }

    #[test]
    fn doubling_epsilon_halves_scale() {
        for eps in [1.25, 1.5, 2.0] {
            let a = NoiseSpec::per_pixel(eps).unwrap().scale();
            let b = NoiseSpec::per_pixel(2.0 * eps).unwrap().scale();
            assert_eq!(a, 2.0 * b);
        }
    }

    #[test]
    fn sampler_is_deterministic_and_degenerates() {
        let spec = NoiseSpec::per_pixel(1.25).unwrap();
        let a = sample_laplace(&spec, &mut seed::rng(5), 1000).unwrap();
        let b = sample_laplace(&spec, &mut seed::rng(5), 1000).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));

        let tiny = NoiseSpec::per_pixel(1e6).unwrap();
        let v = sample_laplace(&tiny, &mut seed::rng(1), 10_000).unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1e-4));
        assert!(sample_laplace(&tiny, &mut seed::rng(1), 0).is_err());
    }

    #[test]
    fn base_noise_matches_seeded_recompute() {
        let x = img(&[0.1, 0.4, 0.9, 0.0, 1.0, 0.5]);
        let spec = NoiseSpec::per_pixel(2.0).unwrap();
        let p = add_base_noise(&x, 3, &spec, &mut seed::rng(11));
        let noise = sample_laplace(&spec, &mut seed::rng(11), x.len()).unwrap();
        for ((out, orig), n) in p.pixels().pixels().iter().zip(x.pixels()).zip(noise) {
            assert_eq!(*out, (orig + n).clamp(0.0, 1.0));
        }
        assert_eq!(p.layer(), NoiseLayer::Base);
        assert_eq!(p.source_index(), 3);
    }

    #[test]
    fn vanishing_noise_layers() {
        let spec = NoiseSpec::per_pixel(1e6).unwrap();
        let p = add_base_noise(&img(&[0.0; 4]), 0, &spec, &mut seed::rng(2));
        assert!(p.pixels().pixels().iter().all(|v| *v <= 1e-4));
        let q = rand_post_process(&p, &spec, &mut seed::rng(3)).unwrap();
        assert!(q.pixels().pixels().iter().all(|v| *v <= 2e-4));
        assert_eq!(q.layer(), NoiseLayer::RandPost);
    }

    #[test]
    fn rand_post_matches_seeded_recompute_and_rejects_stacking() {
        let spec = NoiseSpec::per_pixel(1.5).unwrap();
        let p = add_base_noise(&img(&[0.2, 0.7, 0.3]), 0, &spec, &mut seed::rng(1));
        let q = rand_post_process(&p, &spec, &mut seed::rng(8)).unwrap();
        let noise = sample_laplace(&spec, &mut seed::rng(8), 3).unwrap();
        for ((out, prev), n) in q.pixels().pixels().iter().zip(p.pixels().pixels()).zip(noise) {
            assert_eq!(*out, (prev + n).clamp(0.0, 1.0));
        }
        assert!(matches!(
            rand_post_process(&q, &spec, &mut seed::rng(8)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn sup_mean_and_errors() {
        let a = base(&[0.0, 1.0, 0.5], 0);
        let b = base(&[1.0, 0.0, 0.5], 1);
        let s = sup_combine(&a, &b).unwrap();
        assert_eq!(s.pixels().pixels(), &[0.5, 0.5, 0.5]);
        assert_eq!(s.layer(), NoiseLayer::SupPost);
        assert_eq!((s.source_index(), s.pair_index()), (0, Some(1)));

        let twin = base(&[0.0, 1.0, 0.5], 2);
        assert_eq!(sup_combine(&a, &twin).unwrap().pixels().pixels(), a.pixels().pixels());

        assert!(matches!(sup_combine(&a, &a), Err(Error::Validation(_))));
        let short = base(&[0.1, 0.2], 5);
        assert!(matches!(sup_combine(&a, &short), Err(Error::Shape { .. })));
        assert!(matches!(sup_combine(&s, &b), Err(Error::State(_))));
    }

    #[test]
    fn sup_three_enumerates_ordered_pairs() {
        let prot: Vec<_> = (0..3).map(|i| base(&[i as f64 / 3.0], i)).collect();
        let spec = NoiseSpec::per_pixel(2.0).unwrap();
        let c = build_candidate_set(&prot, Mechanism::Sup, spec, None, 0).unwrap();
        let pairs: Vec<_> = c.keys().iter().map(|k| (k.source, k.other)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        assert!(build_candidate_set(&prot[..1], Mechanism::Sup, spec, None, 0).is_err());
    }

    #[test]
    fn rand_post_spec_defaults_to_base() {
        let spec = NoiseSpec::per_pixel(1.5).unwrap();
        let mut rng = seed::rng(4);
        let prot: Vec<_> = (0..4)
            .map(|i| add_base_noise(&img(&[0.3, 0.6]), i, &spec, &mut rng))
            .collect();
        let implicit = build_candidate_set(&prot, Mechanism::Rand, spec, None, 9).unwrap();
        let explicit = build_candidate_set(&prot, Mechanism::Rand, spec, Some(spec), 9).unwrap();
        assert_eq!(implicit.materialize(), explicit.materialize());
        assert_eq!(implicit.post_spec(), spec);
    }

    #[test]
    fn subset_identity_determinism_and_range() {
        let spec = NoiseSpec::per_pixel(2.0).unwrap();
        let prot: Vec<_> = (0..6).map(|i| base(&[0.5], i)).collect();
        let c = build_candidate_set(&prot, Mechanism::Sup, spec, None, 0).unwrap();
        let all = select_inference_subset(&c, c.len(), 3).unwrap();
        assert_eq!(all.keys(), c.keys());
        let a = select_inference_subset(&c, 10, 3).unwrap();
        let b = select_inference_subset(&c, 10, 3).unwrap();
        assert_eq!(a.keys(), b.keys());
        assert!(select_inference_subset(&c, 0, 3).is_err());
        assert!(select_inference_subset(&c, 31, 3).is_err());
    }

    #[test]
    fn pgm_dump_has_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let a = ImageTensor::new(vec![0.0, 1.0, 0.5, 0.25], 2, 2, 1).unwrap();
        write_pgm_grid(&[&a, &a, &a], 2, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n5 5\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 25);
        assert_eq!(bytes[header.len() + 1], 255);
        assert_eq!(bytes[header.len() + 2], 255);
    }
}
