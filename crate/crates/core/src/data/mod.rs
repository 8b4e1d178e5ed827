//! Dataset ingestion, synthetic-pool persistence, and mixed real/synthetic
//! batch sampling.
//!
//! Two datasets are registered: `toy-2class`, a procedurally generated
//! 2-class 16x16 grayscale set used by the oracles and CI, and `cifar10`,
//! a loader for the standard binary-format files for trend experiments.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveWriter};
use crate::error::{Error, Result};
use crate::nn::Images;
use crate::rng::{self, substream};

/// Provenance of an example within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Real,
    Synthetic,
}

/// A batch of images in [0,1] with integer class labels; the unit of all
/// training and evaluation.
#[derive(Debug, Clone)]
pub struct LabeledImageBatch {
    pub images: Images,
    pub labels: Array1<usize>,
    pub source_flags: Vec<Source>,
}

impl LabeledImageBatch {
    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check the pixel-range and label invariants.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.len();
        if self.labels.len() != n || self.source_flags.len() != n {
            return Err(Error::shape(
                format!("labels/flags of length {n}"),
                format!("{} / {}", self.labels.len(), self.source_flags.len()),
            ));
        }
        if self.images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::numeric("batch", "pixel outside [0,1]"));
        }
        if self.labels.iter().any(|&y| y >= num_classes) {
            return Err(Error::argument(format!(
                "label out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }

    /// Select rows by index (duplicates allowed).
    pub fn select(&self, indices: &[usize]) -> LabeledImageBatch {
        let (_, c, h, w) = self.images.dim();
        let mut images = Images::zeros((indices.len(), c, h, w));
        let mut labels = Array1::<usize>::zeros(indices.len());
        let mut flags = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images
                .slice_mut(s![row, .., .., ..])
                .assign(&self.images.slice(s![i, .., .., ..]));
            labels[row] = self.labels[i];
            flags.push(self.source_flags[i]);
        }
        LabeledImageBatch {
            images,
            labels,
            source_flags: flags,
        }
    }

    pub fn concat(&self, other: &LabeledImageBatch) -> LabeledImageBatch {
        let images =
            ndarray::concatenate(ndarray::Axis(0), &[self.images.view(), other.images.view()])
                .expect("image shapes compatible");
        let labels = ndarray::concatenate(
            ndarray::Axis(0),
            &[self.labels.view(), other.labels.view()],
        )
        .expect("label concat");
        let mut source_flags = self.source_flags.clone();
        source_flags.extend_from_slice(&other.source_flags);
        LabeledImageBatch {
            images,
            labels,
            source_flags,
        }
    }

    pub fn label_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut hist = vec![0; num_classes];
        for &y in self.labels.iter() {
            hist[y] += 1;
        }
        hist
    }
}

/// Train/test split selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Parameters of the procedural toy dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToyConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Std-dev of the additive pixel noise.
    pub pixel_noise: f64,
    /// Class-grating amplitude range; low amplitudes make examples attackable.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Amplitude range of the class-irrelevant higher-frequency distractor
    /// grating (random orientation and phase per image).
    pub distractor_min: f64,
    pub distractor_max: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            train_per_class: 256,
            test_per_class: 64,
            pixel_noise: 0.08,
            amplitude_min: 0.06,
            amplitude_max: 0.28,
            distractor_min: 0.05,
            distractor_max: 0.2,
        }
    }
}

/// Registered datasets, keyed by string id in run configuration files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum DatasetSpec {
    #[serde(rename = "toy-2class")]
    Toy2Class(ToyConfig),
    Cifar10 { root: PathBuf },
}

impl DatasetSpec {
    pub fn id(&self) -> &'static str {
        match self {
            DatasetSpec::Toy2Class(_) => "toy-2class",
            DatasetSpec::Cifar10 { .. } => "cifar10",
        }
    }

    pub fn from_id(id: &str) -> Result<DatasetSpec> {
        match id {
            "toy-2class" => Ok(DatasetSpec::Toy2Class(ToyConfig::default())),
            "cifar10" => Err(Error::config(
                "cifar10 requires a root directory; configure [dataset] root",
            )),
            other => Err(Error::config(format!("unknown dataset id {other}"))),
        }
    }
}

/// An in-memory dataset: every example plus its provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub split: Split,
    pub num_classes: usize,
    pub image_shape: (usize, usize, usize),
    pub data: LabeledImageBatch,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Iterate over contiguous batches in stored order (last may be short).
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = LabeledImageBatch> + '_ {
        let n = self.len();
        (0..n.div_ceil(batch_size)).map(move |b| {
            let lo = b * batch_size;
            let hi = (lo + batch_size).min(n);
            let idx: Vec<usize> = (lo..hi).collect();
            self.data.select(&idx)
        })
    }

    /// Persist to a tensor-archive cache (uint8 pixels, 1/255 steps).
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "dataset-cache",
            "dataset": self.id,
            "split": self.split.to_string(),
            "num_classes": self.num_classes,
        });
        let mut w = ArchiveWriter::new(meta);
        w.put_u8("images", &quantize_images(&self.data.images));
        let labels: ArrayD<i64> = self
            .data
            .labels
            .mapv(|v| v as i64)
            .into_dyn();
        w.put_i64("labels", &labels);
        w.write_to(path)
    }
}

pub const TOY_IMAGE_SIZE: usize = 16;
pub const TOY_NUM_CLASSES: usize = 2;

/// Load a registered dataset with a deterministic example order.
pub fn load_dataset(spec: &DatasetSpec, split: Split, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Toy2Class(cfg) => Ok(generate_toy(cfg, split, seed)),
        DatasetSpec::Cifar10 { root } => load_cifar10(root, split, seed),
    }
}

/// Generate one toy example: an oriented low-frequency grating carries the
/// class (class 0 horizontal, class 1 vertical); a higher-frequency
/// distractor grating with random orientation carries no class information
/// but confuses orientation statistics at low noise. Pixel noise on top,
/// clamped to [0,1].
fn toy_example(label: usize, rng: &mut rng::Stream, cfg: &ToyConfig) -> Vec<f64> {
    let size = TOY_IMAGE_SIZE;
    let tau = std::f64::consts::TAU;
    let phase: f64 = rng.random_range(0.0..tau);
    let amp: f64 = rng.random_range(cfg.amplitude_min..cfg.amplitude_max);
    let d_phase: f64 = rng.random_range(0.0..tau);
    let d_amp: f64 = rng.random_range(cfg.distractor_min..cfg.distractor_max);
    let d_horizontal: bool = rng.random_range(0.0..1.0) < 0.5;
    let (freq, d_freq) = (2.0, 5.0);
    let mut px = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let t = if label == 0 { i } else { j } as f64;
            let dt = if d_horizontal { i } else { j } as f64;
            let signal = amp * (tau * freq * t / size as f64 + phase).sin();
            let distractor = d_amp * (tau * d_freq * dt / size as f64 + d_phase).sin();
            let noise: f64 = rng.sample(rand_distr::StandardNormal);
            px.push((0.5 + signal + distractor + cfg.pixel_noise * noise).clamp(0.0, 1.0));
        }
    }
    px
}

fn generate_toy(cfg: &ToyConfig, split: Split, seed: u64) -> Dataset {
    let per_class = match split {
        Split::Train => cfg.train_per_class,
        Split::Test => cfg.test_per_class,
    };
    let n = per_class * TOY_NUM_CLASSES;
    let size = TOY_IMAGE_SIZE;
    let mut images = Images::zeros((n, 1, size, size));
    let mut labels = Array1::<usize>::zeros(n);
    for idx in 0..n {
        let label = idx % TOY_NUM_CLASSES;
        // Per-example substream: counts in one split never shift another.
        let mut ex_rng = substream(seed, &format!("toy-{split}"), idx as u64);
        let px = toy_example(label, &mut ex_rng, cfg);
        for i in 0..size {
            for j in 0..size {
                images[[idx, 0, i, j]] = px[i * size + j];
            }
        }
        labels[idx] = label;
    }
    // Deterministic order shuffle so classes are not interleaved trivially.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &format!("toy-order-{split}"), 0));
    let batch = LabeledImageBatch {
        images,
        labels,
        source_flags: vec![Source::Real; n],
    }
    .select(&order);
    Dataset {
        id: "toy-2class".to_string(),
        split,
        num_classes: TOY_NUM_CLASSES,
        image_shape: (1, size, size),
        data: batch,
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIZE: usize = 32;

fn load_cifar10(root: &Path, split: Split, seed: u64) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5)
            .map(|i| root.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![root.join("test_batch.bin")],
    };
    let mut images_raw: Vec<u8> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for path in &files {
        let bytes = fs::read(path).map_err(|e| Error::Ingestion {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Ingestion {
                path: path.clone(),
                msg: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Ingestion {
                    path: path.clone(),
                    msg: format!("label byte {label} out of range"),
                });
            }
            labels.push(label);
            images_raw.extend_from_slice(&rec[1..]);
        }
    }
    let n = labels.len();
    let mut images = Images::zeros((n, 3, CIFAR_SIZE, CIFAR_SIZE));
    for (idx, chunk) in images_raw.chunks_exact(CIFAR_RECORD - 1).enumerate() {
        for c in 0..3 {
            for i in 0..CIFAR_SIZE {
                for j in 0..CIFAR_SIZE {
                    images[[idx, c, i, j]] =
                        f64::from(chunk[c * CIFAR_SIZE * CIFAR_SIZE + i * CIFAR_SIZE + j]) / 255.0;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &format!("cifar-order-{split}"), 0));
    let batch = LabeledImageBatch {
        images,
        labels: Array1::from_vec(labels),
        source_flags: vec![Source::Real; n],
    }
    .select(&order);
    Ok(Dataset {
        id: "cifar10".to_string(),
        split,
        num_classes: 10,
        image_shape: (3, CIFAR_SIZE, CIFAR_SIZE),
        data: batch,
    })
}

// ---------------------------------------------------------------------------
// Synthetic pools
// ---------------------------------------------------------------------------

/// Anything that can synthesize class-conditional images; implemented by the
/// trained diffusion model.
pub trait ImageGenerator {
    fn num_classes(&self) -> usize;
    fn image_shape(&self) -> (usize, usize, usize);
    /// Deterministic for a fixed seed; outputs must lie in [0,1].
    fn generate(&self, n: usize, class: usize, seed: u64) -> Result<Images>;
    /// Identifier of the generating checkpoint, recorded in pool metadata.
    fn checkpoint_id(&self) -> String;
}

/// A persisted pool of synthetic images; read-only after creation.
#[derive(Debug, Clone)]
pub struct SyntheticPool {
    pub archive_path: PathBuf,
    pub count: usize,
    pub class_histogram: Vec<usize>,
    pub generator_checkpoint_id: String,
    pub data: LabeledImageBatch,
}

pub fn quantize_images(images: &Images) -> ArrayD<u8> {
    images
        .mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .into_dyn()
}

pub fn dequantize_images(raw: &ArrayD<u8>) -> Result<Images> {
    let arr = raw
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::shape("rank-4 image tensor", format!("{:?}", raw.shape())))?;
    Ok(arr.mapv(|v| f64::from(v) / 255.0))
}

/// Build a synthetic pool of `n` images and persist it at `out_path`.
///
/// With `class_balanced`, per-class counts differ by at most one (remainder
/// goes to the lowest class indices); otherwise labels are drawn uniformly.
pub fn build_synthetic_pool(
    generator: &dyn ImageGenerator,
    n: usize,
    class_balanced: bool,
    seed: u64,
    out_path: &Path,
) -> Result<SyntheticPool> {
    if n == 0 {
        return Err(Error::argument("pool size must be positive"));
    }
    let k = generator.num_classes();
    let mut counts = vec![0_usize; k];
    if class_balanced {
        for (c, slot) in counts.iter_mut().enumerate() {
            *slot = n / k + usize::from(c < n % k);
        }
    } else {
        let mut rng = substream(seed, "pool-labels", 0);
        for _ in 0..n {
            counts[rng.random_range(0..k)] += 1;
        }
    }

    let (ch, h, w) = generator.image_shape();
    let mut images = Images::zeros((n, ch, h, w));
    let mut labels = Array1::<usize>::zeros(n);
    let mut row = 0;
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let gen = generator.generate(count, class, crate::rng::derive_seed(seed, "pool-class", class as u64))?;
        if gen.iter().any(|v| !v.is_finite()) {
            return Err(Error::Generation(format!(
                "sampler produced non-finite pixels for class {class}"
            )));
        }
        images
            .slice_mut(s![row..row + count, .., .., ..])
            .assign(&gen);
        for r in row..row + count {
            labels[r] = class;
        }
        row += count;
    }

    let meta = serde_json::json!({
        "kind": "synthetic-pool",
        "count": n,
        "class_histogram": counts,
        "generator_checkpoint_id": generator.checkpoint_id(),
    });
    let mut writer = ArchiveWriter::new(meta);
    writer.put_u8("images", &quantize_images(&images));
    writer.put_i64("labels", &labels.mapv(|v| v as i64).into_dyn());
    writer.write_to(out_path)?;
    // Reload through the archive so the in-memory pool matches the bytes on
    // disk (quantization included).
    open_pool(out_path)
}

/// Open a pool archive and verify its invariants.
pub fn open_pool(path: &Path) -> Result<SyntheticPool> {
    let archive = Archive::open(path)?;
    let meta = archive.metadata().clone();
    let count = meta["count"].as_u64().unwrap_or(0) as usize;
    let class_histogram: Vec<usize> = meta["class_histogram"]
        .as_array()
        .map(|a| a.iter().map(|v| v.as_u64().unwrap_or(0) as usize).collect())
        .unwrap_or_default();
    let generator_checkpoint_id = meta["generator_checkpoint_id"]
        .as_str()
        .unwrap_or("")
        .to_string();
    if class_histogram.iter().sum::<usize>() != count {
        return Err(Error::Archive {
            path: path.to_path_buf(),
            msg: "class histogram does not sum to count".into(),
        });
    }
    let images = dequantize_images(&archive.get_u8("images")?)?;
    let labels = archive
        .get_i64("labels")?
        .mapv(|v| v as usize)
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| Error::shape("rank-1 labels", "other"))?;
    if images.dim().0 != count || labels.len() != count {
        return Err(Error::Archive {
            path: path.to_path_buf(),
            msg: "entry sizes disagree with metadata count".into(),
        });
    }
    Ok(SyntheticPool {
        archive_path: path.to_path_buf(),
        count,
        class_histogram,
        generator_checkpoint_id,
        data: LabeledImageBatch {
            images,
            labels,
            source_flags: vec![Source::Synthetic; count],
        },
    })
}

// ---------------------------------------------------------------------------
// Mixed batch sampling
// ---------------------------------------------------------------------------

/// Real/synthetic mixing policy: fixed per-batch counts via the floor rule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixSpec {
    pub real_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return Err(Error::argument("real_fraction must lie in [0,1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn real_count(&self) -> usize {
        (self.real_fraction * self.batch_size as f64).floor() as usize
    }

    pub fn synthetic_count(&self) -> usize {
        self.batch_size - self.real_count()
    }
}

/// Draw one mixed batch: exactly `floor(real_fraction * batch_size)` real
/// examples, the rest synthetic, with source flags set accordingly.
pub fn sample_mixed_batch(
    real: &LabeledImageBatch,
    pool: Option<&SyntheticPool>,
    spec: &MixSpec,
) -> Result<LabeledImageBatch> {
    let mut sampler = MixedBatchSampler::new(real.clone(), pool.cloned(), spec.clone())?;
    Ok(sampler.next_batch())
}

/// Stream of mixed batches for the training loop; indices are drawn
/// uniformly with replacement from each source.
pub struct MixedBatchSampler {
    real: LabeledImageBatch,
    pool: Option<SyntheticPool>,
    spec: MixSpec,
    rng: rng::Stream,
}

impl MixedBatchSampler {
    pub fn new(
        real: LabeledImageBatch,
        pool: Option<SyntheticPool>,
        spec: MixSpec,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.synthetic_count() > 0 {
            match &pool {
                None => {
                    return Err(Error::config(
                        "real_fraction < 1 requires a synthetic pool",
                    ))
                }
                Some(p) if p.count == 0 => {
                    return Err(Error::config("synthetic pool is empty"))
                }
                _ => {}
            }
        }
        if real.is_empty() && spec.real_count() > 0 {
            return Err(Error::config("real dataset is empty"));
        }
        let rng = substream(spec.seed, "mix-batches", 0);
        Ok(MixedBatchSampler {
            real,
            pool,
            spec,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> LabeledImageBatch {
        let n_real = self.spec.real_count();
        let n_synth = self.spec.synthetic_count();
        let real_idx: Vec<usize> = (0..n_real)
            .map(|_| self.rng.random_range(0..self.real.len()))
            .collect();
        let mut batch = self.real.select(&real_idx);
        if n_synth > 0 {
            let pool = self.pool.as_ref().expect("validated in new");
            let synth_idx: Vec<usize> = (0..n_synth)
                .map(|_| self.rng.random_range(0..pool.count))
                .collect();
            let synth = pool.data.select(&synth_idx);
            batch = batch.concat(&synth);
        }
        batch
    }
}
