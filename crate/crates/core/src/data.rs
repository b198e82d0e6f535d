//! Datasets: IDX ingestion, the synthetic class-template generator, and the
//! remote / private-pool / validation split with balanced private sampling.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A flattened image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pixels: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
}

impl ImageTensor {
    pub fn new(pixels: Vec<f64>, height: usize, width: usize, channels: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Validation(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: pixels.len(),
            });
        }
        if let Some((i, p)) = pixels
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::Validation(format!(
                "pixel {i} = {p} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            height,
            width,
            channels,
        })
    }

    /// Single-channel row vector, for fixtures and tests.
    pub fn from_flat(pixels: Vec<f64>) -> Result<Self> {
        let n = pixels.len();
        Self::new(pixels, 1, n, 1)
    }

    /// Builds a tensor with the same shape as `self` from already-clamped pixels.
    pub(crate) fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        debug_assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        Self {
            pixels,
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    RemoteTrain,
    PrivPool,
    Priv,
    Val,
    Full,
}

/// Ordered `(image, label)` pairs. `source_ids` records each item's index in
/// the dataset it was split from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    images: Vec<ImageTensor>,
    labels: Vec<usize>,
    source_ids: Vec<usize>,
    num_classes: usize,
    split_tag: SplitTag,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        num_classes: usize,
        split_tag: SplitTag,
    ) -> Result<Self> {
        let ids = (0..images.len()).collect();
        Self::with_ids(images, labels, ids, num_classes, split_tag)
    }

    fn with_ids(
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        source_ids: Vec<usize>,
        num_classes: usize,
        split_tag: SplitTag,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| !im.same_shape(first)) {
                return Err(Error::Shape {
                    expected: first.len(),
                    actual: bad.len(),
                });
            }
        }
        Ok(Self {
            images,
            labels,
            source_ids,
            num_classes,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    /// Flattened input dimension, or 0 for an empty dataset.
    pub fn input_dim(&self) -> usize {
        self.images.first().map_or(0, ImageTensor::len)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageTensor, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// Number of items per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Items whose label equals `class`.
    pub fn class_items(&self, class: usize) -> Vec<&ImageTensor> {
        self.iter()
            .filter(|(_, l)| *l == class)
            .map(|(im, _)| im)
            .collect()
    }

    fn subset(&self, positions: &[usize], tag: SplitTag) -> Self {
        Self {
            images: positions.iter().map(|&i| self.images[i].clone()).collect(),
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
            source_ids: positions.iter().map(|&i| self.source_ids[i]).collect(),
            num_classes: self.num_classes,
            split_tag: tag,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    check_len(path, bytes, 4)?;
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Loads an IDX image/label file pair (MNIST family). Bytes are scaled to
/// `[0, 1]` by dividing by 255; the class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read_file(ip)?;
    let lb = read_file(lp)?;

    check_magic(ip, &ib, IDX_IMAGES_MAGIC)?;
    check_len(ip, &ib, 16)?;
    let count = BigEndian::read_u32(&ib[4..8]) as usize;
    let rows = BigEndian::read_u32(&ib[8..12]) as usize;
    let cols = BigEndian::read_u32(&ib[12..16]) as usize;
    let image_bytes = rows * cols;
    check_len(ip, &ib, 16 + count * image_bytes)?;

    check_magic(lp, &lb, IDX_LABELS_MAGIC)?;
    check_len(lp, &lb, 8)?;
    let label_count = BigEndian::read_u32(&lb[4..8]) as usize;
    check_len(lp, &lb, 8 + label_count)?;

    if count != label_count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let labels: Vec<usize> = lb[8..8 + count].iter().map(|&b| usize::from(b)).collect();
    let images = ib[16..16 + count * image_bytes]
        .chunks_exact(image_bytes.max(1))
        .take(count)
        .map(|chunk| {
            let px = chunk.iter().map(|&b| f64::from(b) / 255.0).collect();
            ImageTensor::new(px, rows, cols, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(images, labels, num_classes, SplitTag::Full)
}

/// Quantizes a pixel to a byte with round-half-up.
pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a single-channel dataset as an IDX image/label pair.
pub fn write_idx(
    dataset: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (rows, cols) = dataset
        .images
        .first()
        .map_or((0, 0), |im| (im.height, im.width));
    if dataset.images.iter().any(|im| im.channels != 1) {
        return Err(Error::Validation("IDX writer supports one channel only".into()));
    }
    let n = dataset.len();
    let mut ib = vec![0u8; 16];
    BigEndian::write_u32(&mut ib[0..4], IDX_IMAGES_MAGIC);
    BigEndian::write_u32(&mut ib[4..8], n as u32);
    BigEndian::write_u32(&mut ib[8..12], rows as u32);
    BigEndian::write_u32(&mut ib[12..16], cols as u32);
    for im in &dataset.images {
        ib.extend(im.pixels.iter().map(|&p| quantize(p)));
    }
    let mut lb = vec![0u8; 8];
    BigEndian::write_u32(&mut lb[0..4], IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut lb[4..8], n as u32);
    for &l in &dataset.labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::Validation(format!("label {l} does not fit in a byte")))?;
        lb.push(b);
    }
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    fs::write(ip, ib).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lb).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

/// Parameters of the synthetic class-template generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Side length of the coarse grid each template is upsampled from.
    pub template_grid: usize,
    /// Independent templates per class; a sample picks one uniformly.
    pub modes_per_class: usize,
    /// Std-dev of the per-sample low-frequency deformation.
    pub deformation: f64,
    /// Std-dev of per-pixel jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            per_class: 500,
            height: 8,
            width: 8,
            channels: 1,
            template_grid: 3,
            modes_per_class: 1,
            deformation: 0.15,
            jitter: 0.1,
            seed: 0,
        }
    }
}

/// Bilinear upsampling of a `g x g` grid to `h x w`.
fn upsample(grid: &[f64], g: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    let coord = |i: usize, n: usize| -> f64 {
        if n <= 1 {
            0.0
        } else {
            i as f64 * (g - 1) as f64 / (n - 1) as f64
        }
    };
    for r in 0..h {
        let y = coord(r, h);
        let y0 = (y.floor() as usize).min(g - 1);
        let y1 = (y0 + 1).min(g - 1);
        let fy = y - y0 as f64;
        for c in 0..w {
            let x = coord(c, w);
            let x0 = (x.floor() as usize).min(g - 1);
            let x1 = (x0 + 1).min(g - 1);
            let fx = x - x0 as f64;
            let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
            let bot = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Generates a class-conditional dataset: every class owns one or more smooth
/// random templates; samples add a low-frequency deformation and pixel jitter, then
/// clamp to `[0, 1]`. Items are ordered class by class.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.num_classes < 2 {
        return Err(Error::Validation(format!(
            "synthetic data needs at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.template_grid < 2 || spec.height == 0 || spec.width == 0 || spec.modes_per_class == 0 {
        return Err(Error::Validation("degenerate synthetic image shape".into()));
    }
    let g = spec.template_grid;
    let plane = spec.height * spec.width;
    let mut rng = seed::rng(spec.seed);
    let deform = Normal::new(0.0, spec.deformation.max(0.0))
        .map_err(|e| Error::Validation(e.to_string()))?;
    let jitter =
        Normal::new(0.0, spec.jitter.max(0.0)).map_err(|e| Error::Validation(e.to_string()))?;

    let templates: Vec<Vec<Vec<f64>>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.modes_per_class)
                .map(|_| {
                    (0..spec.channels)
                        .flat_map(|_| {
                            let coarse: Vec<f64> =
                                (0..g * g).map(|_| rng.random::<f64>()).collect();
                            upsample(&coarse, g, spec.height, spec.width)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let total = spec.num_classes * spec.per_class;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (class, modes) in templates.iter().enumerate() {
        for _ in 0..spec.per_class {
            let template = &modes[rng.random_range(0..modes.len())];
            let mut px = Vec::with_capacity(template.len());
            for ch in 0..spec.channels {
                let coarse: Vec<f64> = (0..g * g).map(|_| deform.sample(&mut rng)).collect();
                let field = upsample(&coarse, g, spec.height, spec.width);
                let base = &template[ch * plane..(ch + 1) * plane];
                px.extend(
                    base.iter()
                        .zip(&field)
                        .map(|(t, d)| (t + d + jitter.sample(&mut rng)).clamp(0.0, 1.0)),
                );
            }
            images.push(ImageTensor::new(px, spec.height, spec.width, spec.channels)?);
            labels.push(class);
        }
    }
    LabeledDataset::new(images, labels, spec.num_classes, SplitTag::Full)
}

/// Count-based three-way split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub remote_train_count: usize,
    pub priv_pool_count: usize,
    pub val_count: usize,
    pub priv_size: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn validate(&self, total: usize, num_classes: usize) -> Result<()> {
        let sum = self.remote_train_count + self.priv_pool_count + self.val_count;
        if sum > total {
            return Err(Error::Size(format!(
                "split counts sum to {sum} but dataset has {total} items"
            )));
        }
        if self.priv_size > self.priv_pool_count {
            return Err(Error::Size(format!(
                "priv_size {} exceeds priv pool {}",
                self.priv_size, self.priv_pool_count
            )));
        }
        if num_classes > 0 && !self.priv_size.is_multiple_of(num_classes) {
            return Err(Error::Size(format!(
                "priv_size {} is not divisible by {num_classes} classes",
                self.priv_size
            )));
        }
        Ok(())
    }
}

/// Shuffles `dataset` under `plan.seed` and cuts disjoint remote-train,
/// private-pool and validation partitions.
pub fn split(
    dataset: &LabeledDataset,
    plan: &SplitPlan,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let sum = plan.remote_train_count + plan.priv_pool_count + plan.val_count;
    if sum > dataset.len() {
        return Err(Error::Size(format!(
            "split counts sum to {sum} but dataset has {} items",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng(plan.seed));
    let (remote, rest) = order.split_at(plan.remote_train_count);
    let (pool, rest) = rest.split_at(plan.priv_pool_count);
    let val = &rest[..plan.val_count];
    Ok((
        dataset.subset(remote, SplitTag::RemoteTrain),
        dataset.subset(pool, SplitTag::PrivPool),
        dataset.subset(val, SplitTag::Val),
    ))
}

/// Draws exactly `priv_size / C` items of every class without replacement.
pub fn sample_balanced_priv(
    priv_pool: &LabeledDataset,
    priv_size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let c = priv_pool.num_classes;
    if c == 0 || !priv_size.is_multiple_of(c) {
        return Err(Error::Size(format!(
            "priv_size {priv_size} is not divisible by {c} classes"
        )));
    }
    let per_class = priv_size / c;
    let mut rng = seed::rng(seed);
    let mut chosen = Vec::with_capacity(priv_size);
    for class in 0..c {
        let members: Vec<usize> = (0..priv_pool.len())
            .filter(|&i| priv_pool.labels[i] == class)
            .collect();
        if members.len() < per_class {
            return Err(Error::Size(format!(
                "class {class} has {} items, {per_class} required",
                members.len()
            )));
        }
        chosen.extend(members.choose_multiple(&mut rng, per_class).copied());
    }
    chosen.shuffle(&mut rng);
    Ok(priv_pool.subset(&chosen, SplitTag::Priv))
}
