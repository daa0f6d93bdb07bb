//! Labeled datasets: CIFAR-10 binary ingestion and a synthetic
//! style–content generator.
//!
//! The synthetic generator draws per-class content centers with a guaranteed
//! mutual separation, adds Gaussian style coordinates, and mixes the latent
//! `(content, style)` vector through a seeded orthogonal matrix. Because the
//! mixing is orthogonal, its transpose un-mixes — tests and style-resampling
//! augmentation both rely on that.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::random_orthogonal;
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// CIFAR-10 binary record layout: 1 label byte + 3 x 32 x 32 pixel bytes.
pub const CIFAR_RECORD_BYTES: usize = 3073;
/// Flattened CIFAR-10 feature dimension (channel-planar RGB).
pub const CIFAR_DIM: usize = 3072;
const CIFAR_CLASSES: usize = 10;

/// Where a dataset came from; the synthetic arm carries the generative
/// structure (config, mixing matrix, class centers) that augmentation and
/// tests need.
#[derive(Clone, Debug)]
pub enum Provenance<S: Real = f64> {
    Cifar10,
    Synthetic { config: SynthConfig<S>, mixing: Tensor<S>, centers: Tensor<S> },
}

impl<S: Real> Provenance<S> {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::Cifar10 => "cifar10",
            Provenance::Synthetic { .. } => "synthetic",
        }
    }
}

/// Synthetic style–content generator configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig<S: Real = f64> {
    pub content_dim: usize,
    pub style_dim: usize,
    pub class_count: usize,
    pub samples_per_class: usize,
    /// Minimum pairwise distance between class content centers (> 0).
    pub content_separation: S,
    /// Standard deviation of each style coordinate (>= 0).
    pub style_scale: S,
    /// Standard deviation of the content perturbation around the class
    /// center (>= 0); 0 collapses each class to a point in content space.
    pub content_noise: S,
    /// Seed for centers, mixing matrix, and sample draws.
    pub seed: u64,
}

impl<S: Real> Default for SynthConfig<S> {
    fn default() -> Self {
        SynthConfig {
            content_dim: 8,
            style_dim: 24,
            class_count: 10,
            samples_per_class: 200,
            content_separation: S::of(6.0),
            style_scale: S::of(3.0),
            content_noise: S::of(1.0),
            seed: 7,
        }
    }
}

impl<S: Real> SynthConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidArg(format!(
                "synthetic class count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.samples_per_class < 1 {
            return Err(Error::InvalidArg("samples per class must be >= 1".into()));
        }
        if self.content_dim == 0 {
            return Err(Error::InvalidArg("content dim must be >= 1".into()));
        }
        if !(self.content_separation > S::zero()) {
            return Err(Error::InvalidArg(format!(
                "content separation must be > 0, got {}",
                self.content_separation
            )));
        }
        if self.style_scale < S::zero() || self.content_noise < S::zero() {
            return Err(Error::InvalidArg("style scale and content noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Observed input dimension after mixing.
    pub fn input_dim(&self) -> usize {
        self.content_dim + self.style_dim
    }
}

/// A dataset of flattened feature rows with integer labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset<S: Real = f64> {
    examples: Tensor<S>,
    labels: Vec<usize>,
    class_count: usize,
    provenance: Provenance<S>,
}

impl<S: Real> LabeledDataset<S> {
    pub fn new(
        examples: Tensor<S>,
        labels: Vec<usize>,
        class_count: usize,
        provenance: Provenance<S>,
    ) -> Result<Self> {
        if examples.rows() == 0 {
            return Err(Error::InvalidArg("dataset must contain at least one example".into()));
        }
        if labels.len() != examples.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} examples",
                labels.len(),
                examples.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArg(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if !examples.is_all_finite() {
            return Err(Error::InvalidArg("dataset features must be finite".into()));
        }
        Ok(LabeledDataset { examples, labels, class_count, provenance })
    }

    pub fn n(&self) -> usize {
        self.examples.rows()
    }

    pub fn dim(&self) -> usize {
        self.examples.cols()
    }

    pub fn examples(&self) -> &Tensor<S> {
        &self.examples
    }

    pub fn example(&self, i: usize) -> &[S] {
        self.examples.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn provenance(&self) -> &Provenance<S> {
        &self.provenance
    }

    /// Keep only the given rows (e.g. a train/test split); provenance is
    /// shared unchanged.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let examples = self.examples.select_rows(indices)?;
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n() {
                return Err(Error::InvalidArg(format!("subset index {i} out of range")));
            }
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(examples, labels, self.class_count, self.provenance.clone())
    }

    /// Writes features in the PHT1 tensor format and labels as a sidecar
    /// text file with one integer per line.
    pub fn export(&self, features_path: &Path, labels_path: &Path) -> Result<()> {
        self.examples.save(features_path)?;
        let mut text = String::with_capacity(self.labels.len() * 3);
        for &l in &self.labels {
            text.push_str(&l.to_string());
            text.push('\n');
        }
        std::fs::write(labels_path, text)
            .map_err(|e| Error::io(labels_path.display().to_string(), e))
    }
}

/// Loads CIFAR-10 binary files (3073-byte records: label byte then 3072
/// channel-planar pixel bytes). Pixels are rescaled to [0, 1]; record order
/// is preserved across the path list.
pub fn load_cifar10_binary<S: Real>(paths: &[impl AsRef<Path>]) -> Result<LabeledDataset<S>> {
    if paths.is_empty() {
        return Err(Error::InvalidArg("no CIFAR-10 files given".into()));
    }
    let mut rows: Vec<S> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let inv = S::one() / S::of(255.0);
    for p in paths {
        let path = p.as_ref();
        let display = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(display.clone(), e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::MalformedData {
                path: display,
                reason: format!(
                    "length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
                    bytes.len()
                ),
            });
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            let label = record[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::MalformedData {
                    path: display,
                    reason: format!("record {r} has label byte {label} >= {CIFAR_CLASSES}"),
                });
            }
            labels.push(label);
            rows.extend(record[1..].iter().map(|&b| S::of(b as f64) * inv));
        }
    }
    let n = labels.len();
    let examples = Tensor::new(n, CIFAR_DIM, rows)?;
    LabeledDataset::new(examples, labels, CIFAR_CLASSES, Provenance::Cifar10)
}

/// Generates a synthetic style–content dataset. For class `c` the content
/// block is `center_c + content_noise * N(0, I)`; the style block is
/// `style_scale * N(0, I)`; the observed row is the orthogonal mixing matrix
/// applied to `[content; style]`. Deterministic given the config seed.
pub fn generate_synthetic<S: Real>(config: &SynthConfig<S>) -> Result<LabeledDataset<S>> {
    config.validate()?;
    let p = config.input_dim();
    let centers = class_centers(config);
    let mixing = random_orthogonal::<S>(p, derive_seed(config.seed, &[1]));
    let mut rng = rng_from(derive_seed(config.seed, &[2]));

    let n = config.class_count * config.samples_per_class;
    let mut latent = vec![S::zero(); p];
    let mut rows: Vec<S> = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for c in 0..config.class_count {
        for _ in 0..config.samples_per_class {
            for j in 0..config.content_dim {
                let noise = S::of(rng.sample::<f64, _>(StandardNormal));
                latent[j] = centers.get(c, j) + config.content_noise * noise;
            }
            for j in 0..config.style_dim {
                let draw = S::of(rng.sample::<f64, _>(StandardNormal));
                latent[config.content_dim + j] = config.style_scale * draw;
            }
            // x = Q u, with Q's rows indexing observed coordinates
            for i in 0..p {
                let mut acc = S::zero();
                let qrow = mixing.row(i);
                for (q, u) in qrow.iter().zip(&latent) {
                    acc += *q * *u;
                }
                rows.push(acc);
            }
            labels.push(c);
        }
    }
    let examples = Tensor::new(n, p, rows)?;
    let provenance =
        Provenance::Synthetic { config: config.clone(), mixing, centers };
    LabeledDataset::new(examples, labels, config.class_count, provenance)
}

/// Class content centers, `C x content_dim`, with pairwise distances >= the
/// configured separation. When C fits in the content dimension the centers
/// are scaled canonical basis vectors (pairwise distance exactly the
/// separation); otherwise seeded Gaussian rows rescaled so the minimum
/// pairwise distance equals it.
fn class_centers<S: Real>(config: &SynthConfig<S>) -> Tensor<S> {
    let c = config.class_count;
    let d = config.content_dim;
    let sep = config.content_separation;
    if c <= d {
        let mut centers = Tensor::zeros(c, d);
        let r = sep / S::of(2.0).sqrt();
        for i in 0..c {
            centers.set(i, i, r);
        }
        return centers;
    }
    let mut rng = rng_from(derive_seed(config.seed, &[0]));
    loop {
        let data: Vec<S> =
            (0..c * d).map(|_| S::of(rng.sample::<f64, _>(StandardNormal))).collect();
        let centers = Tensor::new(c, d, data).expect("center shape");
        let mut min_dist = S::infinity();
        for i in 0..c {
            for j in (i + 1)..c {
                let dist = centers
                    .row(i)
                    .iter()
                    .zip(centers.row(j))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<S>()
                    .sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        if min_dist > S::zero() {
            return centers.scale(sep / min_dist);
        }
        // coincident Gaussian rows have probability zero; redraw
    }
}

/// Un-mixes an observed synthetic row back to latent `[content; style]`
/// coordinates via the transpose of the orthogonal mixing matrix.
pub fn unmix<S: Real>(mixing: &Tensor<S>, row: &[S]) -> Vec<S> {
    let p = mixing.rows();
    debug_assert_eq!(row.len(), p);
    let mut latent = vec![S::zero(); p];
    for (i, &x) in row.iter().enumerate() {
        let qrow = mixing.row(i);
        for (u, q) in latent.iter_mut().zip(qrow) {
            *u += *q * x;
        }
    }
    latent
}

/// Mixes latent `[content; style]` coordinates to an observed row.
pub fn mix<S: Real>(mixing: &Tensor<S>, latent: &[S]) -> Vec<S> {
    let p = mixing.rows();
    debug_assert_eq!(latent.len(), p);
    (0..p)
        .map(|i| mixing.row(i).iter().zip(latent).map(|(&q, &u)| q * u).sum())
        .collect()
}
