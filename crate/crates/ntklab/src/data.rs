//! Dataset ingestion and generation: IDX-format image/label files, synthetic
//! class-structured data, normalization, and target encodings.
//!
//! The IDX layer is bit-exact: readers and writers agree byte for byte, so a
//! subset written back to disk reloads identically. Loaded pixels are scaled
//! to `[0, 1]` and then, by default, each image is rescaled to unit
//! Euclidean norm so experiment inputs satisfy `|x|_2 <= 1`; a raw `[0, 1]`
//! mode is available.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::network::InputBatch;
use crate::rng;

/// Which side of an experiment's split a dataset feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Target encoding for classification labels.
///
/// * `ZeroOne`: 1 at the class index, 0 elsewhere (row sum 1).
/// * `PlusMinus`: +1 at the class index, -1 elsewhere (row sum `2 - K`).
///
/// Scalar targets (one output, two classes) become a single `{0, 1}` or
/// `{-1, +1}` column respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    ZeroOne,
    PlusMinus,
}

/// An immutable labeled dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: InputBatch,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `D x num_classes` encoded targets (see [`Encoding`]).
    pub one_hot: Array2<f64>,
    pub encoding: Encoding,
    pub split: Split,
}

/// Encoded `D x n_classes` target matrix.
pub fn one_hot_targets(labels: &[usize], n_classes: usize, enc: Encoding) -> Array2<f64> {
    let off = match enc {
        Encoding::ZeroOne => 0.0,
        Encoding::PlusMinus => -1.0,
    };
    let mut y = Array2::from_elem((labels.len(), n_classes), off);
    for (d, &c) in labels.iter().enumerate() {
        y[[d, c]] = 1.0;
    }
    y
}

/// Single-column targets for binary problems: class 1 maps to 1, class 0 to
/// 0 (`ZeroOne`) or -1 (`PlusMinus`).
pub fn scalar_targets(labels: &[usize], enc: Encoding) -> Result<Array2<f64>> {
    if labels.iter().any(|&c| c > 1) {
        return Err(Error::config(
            "scalar targets need binary labels (classes 0 and 1)",
        ));
    }
    let lo = match enc {
        Encoding::ZeroOne => 0.0,
        Encoding::PlusMinus => -1.0,
    };
    Ok(Array2::from_shape_fn((labels.len(), 1), |(d, _)| {
        if labels[d] == 1 {
            1.0
        } else {
            lo
        }
    }))
}

impl Dataset {
    pub fn new(
        inputs: InputBatch,
        labels: Vec<usize>,
        num_classes: usize,
        encoding: Encoding,
        split: Split,
    ) -> Result<Dataset> {
        if labels.is_empty() || inputs.num_inputs() == 0 {
            return Err(Error::Data("dataset must contain at least one input".into()));
        }
        if inputs.num_inputs() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.num_inputs(),
                labels.len()
            )));
        }
        if num_classes == 0 || labels.iter().any(|&c| c >= num_classes) {
            return Err(Error::Data(format!(
                "labels must lie in [0, {num_classes})"
            )));
        }
        let one_hot = one_hot_targets(&labels, num_classes, encoding);
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            one_hot,
            encoding,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Targets shaped for a head with `n_outputs` coordinates: the encoded
    /// matrix when `n_outputs == num_classes`, a scalar column for binary
    /// problems when `n_outputs == 1`.
    pub fn targets(&self, n_outputs: usize) -> Result<Array2<f64>> {
        if n_outputs == self.num_classes {
            Ok(self.one_hot.clone())
        } else if n_outputs == 1 && self.num_classes == 2 {
            scalar_targets(&self.labels, self.encoding)
        } else {
            Err(Error::config(format!(
                "cannot shape {}-class targets for {} outputs",
                self.num_classes, n_outputs
            )))
        }
    }

    /// Subset by row indices (duplicates allowed).
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("index {bad} out of range")));
        }
        Dataset::new(
            self.inputs.select(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.encoding,
            self.split,
        )
    }

    /// Reinterprets flat inputs as `(channels, sites)` spatial inputs for
    /// convolutional networks; `channels * sites` must equal the flat width.
    pub fn reshape_spatial(&self, channels: usize, sites: usize) -> Result<Dataset> {
        let flat = self.inputs.flat().ok_or_else(|| {
            Error::shape("inputs are already spatial")
        })?;
        if channels * sites != flat.ncols() {
            return Err(Error::shape(format!(
                "{channels} x {sites} does not tile width {}",
                flat.ncols()
            )));
        }
        let spatial = flat
            .to_owned()
            .into_shape_with_order((flat.nrows(), channels, sites))
            .map_err(|e| Error::shape(e.to_string()))?;
        let mut out = self.clone();
        out.inputs = InputBatch::Spatial(spatial);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(Error::Data(format!("truncated IDX file: missing {what}")));
    }
    Ok(u32::from_be_bytes(bytes[at..end].try_into().expect("4 bytes")))
}

/// Reads an IDX image file (`count x rows x cols` unsigned bytes).
pub fn read_idx_images(path: &Path) -> Result<Array3<u8>> {
    let bytes = std::fs::read(path)?;
    let magic = be_u32(&bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(&bytes, 4, "image count")? as usize;
    let rows = be_u32(&bytes, 8, "row count")? as usize;
    let cols = be_u32(&bytes, 12, "column count")? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::Data(format!(
            "truncated IDX image file: {} bytes, need {need}",
            bytes.len()
        )));
    }
    Ok(Array3::from_shape_vec((count, rows, cols), bytes[16..need].to_vec())
        .expect("shape matches length"))
}

/// Reads an IDX label file (`count` unsigned bytes).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    let magic = be_u32(&bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(&bytes, 4, "label count")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::Data(format!(
            "truncated IDX label file: {} bytes, need {need}",
            bytes.len()
        )));
    }
    Ok(bytes[8..need].to_vec())
}

pub fn write_idx_images(path: &Path, images: &Array3<u8>) -> Result<()> {
    let (count, rows, cols) = images.dim();
    let mut bytes = Vec::with_capacity(16 + images.len());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend(images.iter().copied());
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Pixel normalization applied after the `1/255` scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Rescale each image to unit Euclidean norm (all-zero images stay
    /// zero). The default: experiment inputs then satisfy `|x|_2 <= 1`.
    UnitNorm,
    /// Keep raw `[0, 1]` values.
    Raw01,
}

/// Loads an IDX image/label pair, keeping a `subset`-sized sample drawn
/// without replacement with the given seed, under the default unit-norm
/// convention.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    subset: usize,
    seed: u64,
) -> Result<Dataset> {
    load_idx_with(images_path, labels_path, subset, seed, Normalization::UnitNorm)
}

pub fn load_idx_with(
    images_path: &Path,
    labels_path: &Path,
    subset: usize,
    seed: u64,
    norm: Normalization,
) -> Result<Dataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    let (count, rows, cols) = images.dim();
    if labels.len() != count {
        return Err(Error::Data(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    if subset == 0 || subset > count {
        return Err(Error::Data(format!(
            "subset size {subset} outside [1, {count}]"
        )));
    }
    let mut rng = rng::data_subset_stream(seed);
    let picked = rand::seq::index::sample(&mut rng, count, subset).into_vec();

    let n0 = rows * cols;
    let mut x = Array2::<f64>::zeros((subset, n0));
    for (r, &src) in picked.iter().enumerate() {
        let img = images.index_axis(Axis(0), src);
        for (j, &px) in img.iter().enumerate() {
            x[[r, j]] = px as f64 / 255.0;
        }
        if norm == Normalization::UnitNorm {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                x.row_mut(r).mapv_inplace(|v| v / n);
            }
        }
    }
    let picked_labels: Vec<usize> = picked.iter().map(|&i| labels[i] as usize).collect();
    let n_classes = picked_labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        InputBatch::Flat(x),
        picked_labels,
        n_classes.max(2),
        Encoding::ZeroOne,
        Split::Train,
    )
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Synthetic dataset families. Class centers are fresh standard Gaussian
/// directions scaled by `separation / sqrt(n_0)`; zero separation collapses
/// every class onto one distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Class-conditional Gaussians: `x = center_c + z`, `z ~ N(0, I)`.
    GaussianBlobs { separation: f64 },
    /// Blob samples projected onto the unit sphere: `|x|_2 = 1` exactly.
    UnitSphere { separation: f64 },
}

/// Generates `d` labeled inputs in `R^{n_0}` with classes assigned
/// round-robin (every class represented when `d >= n_classes`).
pub fn synthetic(
    d: usize,
    n_0: usize,
    n_classes: usize,
    seed: u64,
    kind: SyntheticKind,
) -> Result<Dataset> {
    if n_classes == 0 || n_0 == 0 {
        return Err(Error::config("need positive class count and input dimension"));
    }
    if d < n_classes {
        return Err(Error::config(format!(
            "{d} samples cannot cover {n_classes} classes"
        )));
    }
    let (separation, project) = match kind {
        SyntheticKind::GaussianBlobs { separation } => (separation, false),
        SyntheticKind::UnitSphere { separation } => (separation, true),
    };
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::config("class separation must be finite and nonnegative"));
    }
    let mut rng = rng::data_synth_stream(seed);
    let scale = separation / (n_0 as f64).sqrt();
    let centers = Array2::<f64>::from_shape_fn((n_classes, n_0), |_| {
        scale * rng.sample::<f64, _>(StandardNormal)
    });
    let labels: Vec<usize> = (0..d).map(|i| i % n_classes).collect();
    let mut x = Array2::<f64>::zeros((d, n_0));
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..n_0 {
            x[[i, j]] = centers[[c, j]] + rng.sample::<f64, _>(StandardNormal);
        }
        if project {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                x.row_mut(i).mapv_inplace(|v| v / norm);
            } else {
                x.row_mut(i).fill(0.0);
                x[[i, 0]] = 1.0;
            }
        }
    }
    Dataset::new(
        InputBatch::Flat(x),
        labels,
        n_classes,
        Encoding::ZeroOne,
        Split::Train,
    )
}

/// Writes a synthetic IDX image/label pair usable anywhere a real one is:
/// each class paints a bright horizontal band at a class-dependent position
/// over a noisy background. Returns the two file paths.
pub fn synthetic_idx_pair(
    dir: &Path,
    count: usize,
    rows: usize,
    cols: usize,
    n_classes: usize,
    seed: u64,
) -> Result<(PathBuf, PathBuf)> {
    if n_classes == 0 || n_classes > rows || count == 0 {
        return Err(Error::config(
            "need 1 <= n_classes <= rows and a positive image count",
        ));
    }
    let mut rng = rng::data_synth_stream(seed);
    let mut images = Array3::<u8>::zeros((count, rows, cols));
    let mut labels = Vec::with_capacity(count);
    let band = rows / n_classes;
    for i in 0..count {
        let class = i % n_classes;
        labels.push(class as u8);
        for r in 0..rows {
            let in_band = r >= class * band && r < (class + 1) * band;
            for c in 0..cols {
                let noise: f64 = 24.0 * rng.sample::<f64, _>(StandardNormal);
                let base = if in_band { 200.0 } else { 32.0 };
                images[[i, r, c]] = (base + noise).clamp(0.0, 255.0) as u8;
            }
        }
    }
    let images_path = dir.join("synthetic-images-idx3-ubyte");
    let labels_path = dir.join("synthetic-labels-idx1-ubyte");
    write_idx_images(&images_path, &images)?;
    write_idx_labels(&labels_path, &labels)?;
    Ok((images_path, labels_path))
}
