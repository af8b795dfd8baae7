//! Datasets: MNIST in IDX format, a seeded Gaussian-cluster generator, and
//! shuffled minibatch iteration.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, SimRng, Stream};
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Array2<T>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Array2<T>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("dataset has no samples".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        if !features.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("dataset contains non-finite features".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Gathers the given rows into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch<T>> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Usage(format!(
                "sample index {i} out of range for {} samples",
                self.len()
            )));
        }
        Ok(Batch {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// A new dataset made of the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let batch = self.gather(indices)?;
        Self::new(batch.features, batch.labels, self.num_classes, self.split)
    }

    /// Keeps `fraction` of every class (at least one sample per non-empty
    /// class), chosen by a seeded shuffle. Row order follows the original.
    pub fn stratified_subset(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subset fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let mut rng = stream_rng(Stream::Subset, &[seed]);
        let mut keep = Vec::new();
        for c in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            members.shuffle(&mut rng);
            let n = ((members.len() as f64 * fraction).round() as usize).max(1);
            keep.extend_from_slice(&members[..n]);
        }
        keep.sort_unstable();
        self.subset(&keep)
    }
}

/// A minibatch of rows with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub features: Array2<T>,
    pub labels: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self, field: &str) -> Result<u32> {
        let end = self.pos + 4;
        let raw = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::ingest(
                &format!("{}.{field}", self.what),
                "file truncated before header field",
            )
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(raw.try_into().expect("four bytes")))
    }

    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(Error::ingest(
                &format!("{}.data", self.what),
                format!("expected {len} payload bytes, found {}", rest.len()),
            ));
        }
        Ok(&rest[..len])
    }
}

/// Decodes an IDX3 image file into rows of `rows·cols` pixels scaled by 1/255.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<(Array2<T>, usize, usize)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        what: "images",
    };
    let magic = cur.u32("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::ingest(
            "images.magic",
            format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = cur.u32("count")? as usize;
    let rows = cur.u32("rows")? as usize;
    let cols = cur.u32("cols")? as usize;
    let width = rows * cols;
    let data = cur.payload(count * width)?;
    let scale = T::of(255.0);
    let features = Array2::from_shape_fn((count, width), |(i, j)| T::of(data[i * width + j] as f64) / scale);
    Ok((features, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        what: "labels",
    };
    let magic = cur.u32("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::ingest(
            "labels.magic",
            format!("expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = cur.u32("count")? as usize;
    Ok(cur.payload(count)?.iter().map(|&b| b as usize).collect())
}

/// Reads an MNIST image/label file pair. Pixels are scaled to `[0, 1]` and
/// images flattened row-major; the class count is fixed at 10.
pub fn load_mnist_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset<T>> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    let (features, _, _) = parse_idx_images::<T>(&images)?;
    let labels = parse_idx_labels(&labels)?;
    if features.nrows() != labels.len() {
        return Err(Error::ingest(
            "labels.count",
            format!("{} labels but {} images", labels.len(), features.nrows()),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= 10) {
        return Err(Error::ingest("labels.data", format!("label {y} is not a digit")));
    }
    if labels.is_empty() {
        return Err(Error::ingest("images.count", "file holds no images"));
    }
    Dataset::new(features, labels, 10, split)
}

/// Writes raw bytes as an IDX3 image file.
pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let width = rows * cols;
    if width == 0 || !pixels.len().is_multiple_of(width) {
        return Err(Error::Shape(format!(
            "{} pixel bytes do not split into {rows}×{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [
        IDX_IMAGES_MAGIC,
        (pixels.len() / width) as u32,
        rows as u32,
        cols as u32,
    ] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path, e))
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Noise standard deviation around each class mean.
    pub spread: f64,
    /// Class means are standard normal vectors times this factor.
    pub separation: f64,
    pub seed: u64,
}

/// Gaussian clusters with a stratified 80/20 train/test split.
///
/// Each class gets `round(0.2·per_class)` test samples (at least one) and
/// the rest for training. Samples are stored class by class.
pub fn gen_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs classes >= 2 and dim >= 2, got {} and {}",
            spec.classes, spec.dim
        )));
    }
    if spec.per_class < 2 {
        return Err(Error::Config(
            "synthetic per_class must be at least 2 to fill both splits".into(),
        ));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::Config(format!(
            "spread must be non-negative, got {}",
            spec.spread
        )));
    }
    if !(spec.separation > 0.0 && spec.separation.is_finite()) {
        return Err(Error::Config(format!(
            "separation must be positive, got {}",
            spec.separation
        )));
    }
    let mut rng = stream_rng(Stream::Synthetic, &[spec.seed]);
    let normal = |rng: &mut SimRng| -> f64 { StandardNormal.sample(rng) };
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.separation * normal(&mut rng))
                .collect()
        })
        .collect();

    let n_test = ((spec.per_class as f64 * 0.2).round() as usize).clamp(1, spec.per_class - 1);
    let n_train = spec.per_class - n_test;
    let mut train = Vec::with_capacity(spec.classes * n_train * spec.dim);
    let mut test = Vec::with_capacity(spec.classes * n_test * spec.dim);
    let (mut train_y, mut test_y) = (Vec::new(), Vec::new());
    for (c, mean) in means.iter().enumerate() {
        for i in 0..spec.per_class {
            let (xs, ys) = if i < n_train {
                (&mut train, &mut train_y)
            } else {
                (&mut test, &mut test_y)
            };
            xs.extend(mean.iter().map(|&m| T::of(m + spec.spread * normal(&mut rng))));
            ys.push(c);
        }
    }
    let to_array = |v: Vec<T>, n: usize| {
        Array2::from_shape_vec((n, spec.dim), v).expect("row-major buffer matches shape")
    };
    let n_tr = train_y.len();
    let n_te = test_y.len();
    Ok((
        Dataset::new(to_array(train, n_tr), train_y, spec.classes, Split::Train)?,
        Dataset::new(to_array(test, n_te), test_y, spec.classes, Split::Test)?,
    ))
}

/// Shuffles `indices` with a generator seeded by `epoch_seed` and cuts them
/// into batches of `batch_size`; the last batch may be shorter.
pub fn batch_indices(indices: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if indices.is_empty() {
        return Err(Error::Usage("batch iteration over no indices".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut stream_rng(Stream::LocalShuffle, &[epoch_seed]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches over `indices` of `dataset` for one epoch.
pub fn batch_iter<'a, T: Scalar>(
    dataset: &'a Dataset<T>,
    indices: &[usize],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Result<Batch<T>>> + 'a> {
    let batches = batch_indices(indices, batch_size, epoch_seed)?;
    Ok(batches.into_iter().map(move |b| dataset.gather(&b)))
}
