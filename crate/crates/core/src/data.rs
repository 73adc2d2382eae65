//! Labeled datasets: IDX ingestion, synthetic blobs, label randomization, subsetting.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::DenseMatrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Seeded generator for one named purpose; distinct `stream`s never overlap.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::invalid(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if num_classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if labels.len() < num_classes {
            return Err(Error::invalid(format!(
                "{} samples cannot cover {num_classes} classes",
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::invalid("dataset features contain non-finite values"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: name.into(),
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, 0, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, offset as u64, "truncated header"))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

/// Reads an IDX image/label file pair (optionally gzip-compressed).
///
/// Pixels are scaled by 1/255. The class count is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());

    let img = read_maybe_gzip(images_path)?;
    check_magic(&img, IDX_IMAGES_MAGIC, images_path)?;
    let n_images = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_features = rows * cols;
    let expected = 16 + n_images * n_features;
    if img.len() < expected {
        return Err(Error::format(
            images_path,
            img.len() as u64,
            format!("truncated payload: expected {expected} bytes for {n_images} images of {rows}x{cols}"),
        ));
    }

    let lbl = read_maybe_gzip(labels_path)?;
    check_magic(&lbl, IDX_LABELS_MAGIC, labels_path)?;
    let n_labels = be_u32(&lbl, 4, labels_path)? as usize;
    if lbl.len() < 8 + n_labels {
        return Err(Error::format(
            labels_path,
            lbl.len() as u64,
            format!(
                "truncated payload: expected {} bytes for {n_labels} labels",
                8 + n_labels
            ),
        ));
    }
    if n_labels != n_images {
        return Err(Error::format(
            labels_path,
            4,
            format!("count mismatch: {n_images} images but {n_labels} labels"),
        ));
    }

    let features = img[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lbl[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    LabeledDataset::new(
        DenseMatrix::from_raw(n_images, n_features, features),
        labels,
        num_classes,
        name,
    )
}

/// Isotropic Gaussian blobs; class `c` is centered on the unit vector along axis `c`.
pub fn synth_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if num_classes < 2 || per_class < 1 || dim < 1 || !(spread > 0.0) {
        return Err(Error::invalid(format!(
            "synth_blobs needs num_classes >= 2, per_class >= 1, dim >= 1, spread > 0 (got {num_classes}, {per_class}, {dim}, {spread})"
        )));
    }
    if dim < num_classes {
        return Err(Error::invalid(format!(
            "synth_blobs places one class per axis: dim {dim} < num_classes {num_classes}"
        )));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seeded_rng(seed, 1);
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        for _ in 0..per_class {
            for axis in 0..dim {
                let center = if axis == class { 1.0 } else { 0.0 };
                data.push(center + noise.sample(&mut rng));
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(
        DenseMatrix::from_raw(n, dim, data),
        labels,
        num_classes,
        format!("blobs-c{num_classes}-n{per_class}-d{dim}-s{spread}-seed{seed}"),
    )
}

/// Resamples every label uniformly over the class set. Features are copied untouched.
pub fn randomize_labels(ds: &LabeledDataset, seed: u64) -> LabeledDataset {
    let mut rng = seeded_rng(seed, 2);
    let labels = ds.labels.iter().map(|_| rng.random_range(0..ds.num_classes)).collect();
    LabeledDataset {
        features: ds.features.clone(),
        labels,
        num_classes: ds.num_classes,
        name: format!("{}-randomlabels{seed}", ds.name),
    }
}

/// Draws `n` rows without replacement; `n` equal to the dataset size keeps it unchanged.
///
/// With `stratified`, per-class quotas differ by at most one (classes too small
/// for their quota give the shortfall to the next classes in index order).
pub fn subsample(ds: &LabeledDataset, n: usize, seed: u64, stratified: bool) -> Result<LabeledDataset> {
    if n > ds.len() {
        return Err(Error::invalid(format!("cannot draw {n} samples from {}", ds.len())));
    }
    if n == ds.len() {
        return Ok(ds.clone());
    }
    let mut rng = seeded_rng(seed, 3);
    let chosen = if stratified {
        if n < ds.num_classes {
            return Err(Error::invalid(format!(
                "stratified subsample of {n} cannot cover {} classes",
                ds.num_classes
            )));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
        for (i, &l) in ds.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for members in &mut by_class {
            members.shuffle(&mut rng);
        }
        let quotas = stratified_quotas(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), n);
        let mut picked: Vec<usize> = by_class
            .iter()
            .zip(&quotas)
            .flat_map(|(members, &q)| members[..q].iter().copied())
            .collect();
        picked.shuffle(&mut rng);
        picked
    } else {
        let mut all: Vec<usize> = (0..ds.len()).collect();
        all.shuffle(&mut rng);
        all.truncate(n);
        all
    };
    Ok(ds.select(&chosen, format!("{}-sub{n}", ds.name)))
}

/// Water-filling allocation of `n` samples over classes with `available` members.
fn stratified_quotas(available: &[usize], n: usize) -> Vec<usize> {
    let mut quotas = vec![0usize; available.len()];
    let mut remaining = n;
    loop {
        let open: Vec<usize> = (0..available.len()).filter(|&c| quotas[c] < available[c]).collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let share = (remaining / open.len()).max(1);
        for c in open {
            let take = share.min(available[c] - quotas[c]).min(remaining);
            quotas[c] += take;
            remaining -= take;
        }
    }
    quotas
}

/// Disjoint seeded train/test split of the first `train_n + test_n` rows of a shuffled order.
pub fn train_test_split(
    ds: &LabeledDataset,
    train_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if train_n + test_n > ds.len() {
        return Err(Error::invalid(format!(
            "split of {train_n} + {test_n} exceeds {} samples",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seeded_rng(seed, 4));
    let train = ds.select(&order[..train_n], format!("{}-train{train_n}", ds.name));
    let test = ds.select(&order[train_n..train_n + test_n], format!("{}-test{test_n}", ds.name));
    if train.len() < train.num_classes || test.len() < test.num_classes {
        return Err(Error::invalid("split too small to cover every class"));
    }
    Ok((train, test))
}
