//! Datasets (MNIST IDX files, synthetic Gaussian blobs) and Dirichlet
//! partitioning of a dataset across simulated clients.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::stream::stream_rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled classification dataset with dense features.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty { what: "dataset" });
        }
        if features.nrows() != labels.len() {
            return Err(Error::RecordCountMismatch {
                images: features.nrows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Copies the given rows (and their labels) into a new dataset-sized batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let mut x = Array2::zeros((indices.len(), self.feature_dim()));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            x.row_mut(row).assign(&self.features.row(idx));
            labels.push(self.labels[idx]);
        }
        (x, labels)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Reads an IDX image file into an `n x (rows*cols)` matrix of pixels in `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            actual: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            got: bytes.len(),
        });
    }
    let pixels = &bytes[16..needed];
    let mut out = Array2::zeros((n, rows * cols));
    for (i, chunk) in pixels.chunks_exact(rows * cols).enumerate() {
        for (j, &p) in chunk.iter().enumerate() {
            out[[i, j]] = f64::from(p) / 255.0;
        }
    }
    Ok(out)
}

/// Reads an IDX label file into a label vector.
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            actual: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

fn load_idx_pair(images: PathBuf, labels: PathBuf, num_classes: usize) -> Result<Dataset> {
    let features = read_idx_images(&images)?;
    let labels = read_idx_labels(&labels)?;
    Dataset::new(features, labels, num_classes)
}

/// Loads the four standard MNIST IDX files from `dir` as `(train, test)`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx_pair(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        10,
    )?;
    let test = load_idx_pair(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
        10,
    )?;
    Ok((train, test))
}

/// Gaussian-blob classification data: one spherical cluster per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class-mean positions around the origin.
    pub separation: f64,
    /// Standard deviation of samples around their class mean.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 32,
            train_per_class: 500,
            test_per_class: 100,
            separation: 1.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "synthetic data needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidConfig(
                "synthetic feature_dim and per-class sample counts must be positive".into(),
            ));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "synthetic separation must be finite and non-negative, got {}",
                self.separation
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "synthetic noise_std must be finite and positive, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

fn blob_split(
    config: &SyntheticConfig,
    means: &Array2<f64>,
    per_class: usize,
    domain: &str,
) -> Dataset {
    let n = config.num_classes * per_class;
    let mut features = Array2::zeros((n, config.feature_dim));
    let mut labels = Vec::with_capacity(n);
    for class in 0..config.num_classes {
        let mut rng = stream_rng(config.seed, domain, class as u64, 0);
        for s in 0..per_class {
            let row = class * per_class + s;
            for (j, v) in features.row_mut(row).iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *v = means[[class, j]] + config.noise_std * noise;
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, config.num_classes).expect("synthetic split is well-formed")
}

/// Generates `(train, test)` Gaussian-blob datasets from the config seed.
pub fn make_synthetic(config: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let mut mean_rng = stream_rng(config.seed, "synthetic-means", 0, 0);
    let means = Array2::from_shape_fn((config.num_classes, config.feature_dim), |_| {
        let z: f64 = StandardNormal.sample(&mut mean_rng);
        config.separation * z
    });
    Ok((
        blob_split(config, &means, config.train_per_class, "synthetic-train"),
        blob_split(config, &means, config.test_per_class, "synthetic-test"),
    ))
}

/// How to split a dataset across clients: equal-size shards whose class
/// mixtures are drawn from a symmetric Dirichlet with concentration `alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionConfig {
    fn validate(&self, dataset_size: usize) -> Result<()> {
        if self.num_clients == 0 || self.num_clients > dataset_size {
            return Err(Error::TooManyClients {
                num_clients: self.num_clients,
                dataset_size,
            });
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Sample indices per client. Clients are disjoint and jointly cover the dataset.
#[derive(Debug, Clone)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    pub num_classes: usize,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Per-client label histogram, one row per client.
    pub fn class_counts(&self, labels: &[usize]) -> Array2<usize> {
        let mut counts = Array2::zeros((self.clients.len(), self.num_classes));
        for (k, client) in self.clients.iter().enumerate() {
            for &idx in client {
                counts[[k, labels[idx]]] += 1;
            }
        }
        counts
    }

    /// Mean over clients of the Shannon entropy (nats) of their label mixture.
    pub fn mean_label_entropy(&self, labels: &[usize]) -> f64 {
        let counts = self.class_counts(labels);
        let mut total = 0.0;
        for (k, client) in self.clients.iter().enumerate() {
            let size = client.len() as f64;
            let mut h = 0.0;
            for &c in counts.row(k) {
                if c > 0 {
                    let p = c as f64 / size;
                    h -= p * p.ln();
                }
            }
            total += h;
        }
        total / self.clients.len() as f64
    }
}

/// One draw from a symmetric `Dirichlet(alpha, ..., alpha)` over `k` categories.
///
/// Works in log space so concentrations as small as 1e-2 do not underflow:
/// each `Gamma(alpha)` variate is built as `Gamma(alpha + 1) * U^(1/alpha)`
/// and only the log is kept until the final normalization.
pub fn sample_dirichlet(alpha: f64, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("shape is positive and finite");
    let mut logs = Vec::with_capacity(k);
    for _ in 0..k {
        let g: f64 = gamma.sample(rng);
        let u: f64 = loop {
            let u = rng.random::<f64>();
            if u > 0.0 {
                break u;
            }
        };
        logs.push(g.max(f64::MIN_POSITIVE).ln() + u.ln() / alpha);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Largest-remainder apportionment of `total` units proportional to `weights`.
/// Ties on the fractional part go to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let mut out = vec![0usize; weights.len()];
    if total == 0 || weights.is_empty() {
        return out;
    }
    let sum: f64 = weights.iter().sum();
    let mut fractional: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0;
    for (i, &w) in weights.iter().enumerate() {
        let quota = total as f64 * w / sum;
        let floor = quota.floor() as usize;
        out[i] = floor;
        assigned += floor;
        fractional.push((quota - floor as f64, i));
    }
    fractional.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("fractional parts are finite")
            .then(a.1.cmp(&b.1))
    });
    for j in 0..total.saturating_sub(assigned) {
        out[fractional[j % fractional.len()].1] += 1;
    }
    out
}

/// Apportionment with per-category stock limits. When a category runs out,
/// its share is redistributed over the categories that still have stock,
/// proportionally to their weights (uniformly once every weight is zero).
fn apportion_capped(total: usize, weights: &[f64], caps: &[usize]) -> Vec<usize> {
    debug_assert!(caps.iter().sum::<usize>() >= total);
    let mut out = vec![0usize; weights.len()];
    let mut remaining = total;
    while remaining > 0 {
        let active: Vec<usize> = (0..caps.len()).filter(|&i| caps[i] > out[i]).collect();
        let mut w: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
        if w.iter().sum::<f64>() <= 0.0 {
            w = vec![1.0; active.len()];
        }
        let alloc = apportion(remaining, &w);
        for (j, &i) in active.iter().enumerate() {
            let take = alloc[j].min(caps[i] - out[i]);
            out[i] += take;
            remaining -= take;
        }
    }
    out
}

/// Splits `labels` into equal-size client shards with Dirichlet class mixtures.
///
/// Shard sizes are `n / num_clients` rounded down, with the remainder going to
/// the last client. Each client draws a class mixture from
/// `Dirichlet(alpha)`, turns it into integer class targets by largest-remainder
/// rounding, and takes that many samples from per-class pools without
/// replacement; targets that exceed a pool spill over to classes with stock
/// left, so later clients (the last one in particular) may deviate from their
/// drawn mixture.
pub fn partition_dirichlet(
    labels: &[usize],
    num_classes: usize,
    config: &PartitionConfig,
) -> Result<Partition> {
    config.validate(labels.len())?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes,
        });
    }
    let mut rng = stream_rng(config.seed, "partition", 0, 0);

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (idx, &label) in labels.iter().enumerate() {
        pools[label].push(idx);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; num_classes];

    let n = labels.len();
    let base = n / config.num_clients;
    let mut clients = Vec::with_capacity(config.num_clients);
    for k in 0..config.num_clients {
        let size = if k + 1 == config.num_clients {
            base + n % config.num_clients
        } else {
            base
        };
        let mixture = sample_dirichlet(config.alpha, num_classes, &mut rng);
        let stock: Vec<usize> = (0..num_classes).map(|c| pools[c].len() - cursors[c]).collect();
        let counts = apportion_capped(size, &mixture, &stock);
        let mut shard = Vec::with_capacity(size);
        for (c, &take) in counts.iter().enumerate() {
            shard.extend_from_slice(&pools[c][cursors[c]..cursors[c] + take]);
            cursors[c] += take;
        }
        shard.sort_unstable();
        clients.push(shard);
    }
    Ok(Partition {
        clients,
        num_classes,
    })
}
