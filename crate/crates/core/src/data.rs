//! Datasets, view augmentation, and minibatch samplers.
//!
//! The synthetic generator draws class means on a hypersphere and fills
//! classes with Gaussian samples, optionally Zipf-skewed into a long tail.
//! Views are scalar analogs of image augmentations: per-view scaling,
//! additive noise, and coordinate masking. The class-restricted sampler
//! reproduces the imbalanced-minibatch stressor: every batch is drawn from
//! a fresh, small set of classes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ByteReader;
use crate::rng::Rng;

/// In-memory dataset: row-major inputs plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub class_counts: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Row-major matrix of the selected rows.
    pub fn gather_rows(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.input_dim);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() * self.input_dim {
            return Err(Error::config("inputs length disagrees with labels"));
        }
        if self.labels.iter().any(|&y| y >= self.n_classes) {
            return Err(Error::config("label out of range"));
        }
        if self.class_counts.iter().sum::<usize>() != self.len() {
            return Err(Error::config("class_counts do not sum to N"));
        }
        Ok(())
    }
}

/// Synthetic Gaussian-mixture generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub per_class_base: usize,
    pub input_dim: usize,
    /// Radius of the hypersphere the class means are drawn on.
    pub class_sep: f64,
    pub within_std: f64,
    /// 0 gives balanced classes; larger values skew counts as k^(-z).
    pub zipf_exponent: f64,
}

fn zipf_counts(n_classes: usize, base: usize, z: f64) -> Result<Vec<usize>> {
    let mut counts = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        let w = ((k + 1) as f64).powf(-z);
        let c = (base as f64 * w).round() as usize;
        if c < 1 {
            return Err(Error::config(format!(
                "per_class_base {base} too small for Zipf tail (class {k} would be empty)"
            )));
        }
        counts.push(c);
    }
    Ok(counts)
}

fn class_means(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..spec.n_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x *= spec.class_sep / norm;
            }
            v
        })
        .collect()
}

fn fill_samples(
    means: &[Vec<f64>],
    counts: &[usize],
    within_std: f64,
    input_dim: usize,
    rng: &mut Rng,
) -> Dataset {
    let n: usize = counts.iter().sum();
    let mut inputs = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for &m in &means[class] {
                inputs.push(m + within_std * rng.normal());
            }
            labels.push(class);
        }
    }
    Dataset {
        inputs,
        input_dim,
        labels,
        n_classes: means.len(),
        class_counts: counts.to_vec(),
    }
}

/// Generate a dataset: means on the radius-`class_sep` sphere, per-class
/// Gaussian spread, Zipf-shaped class sizes.
pub fn gen_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.n_classes == 0 || spec.per_class_base == 0 || spec.input_dim == 0 {
        return Err(Error::config("synthetic spec needs positive sizes"));
    }
    if spec.zipf_exponent < 0.0 || spec.within_std < 0.0 || spec.class_sep <= 0.0 {
        return Err(Error::config("synthetic spec parameters out of range"));
    }
    let counts = zipf_counts(spec.n_classes, spec.per_class_base, spec.zipf_exponent)?;
    let means = class_means(spec, rng);
    Ok(fill_samples(
        &means,
        &counts,
        spec.within_std,
        spec.input_dim,
        rng,
    ))
}

/// Generate train and eval splits of the same task: identical class means,
/// fresh noise, balanced eval counts.
pub fn gen_synthetic_pair(
    spec: &SyntheticSpec,
    eval_per_class: usize,
    rng: &mut Rng,
) -> Result<(Dataset, Dataset)> {
    if eval_per_class == 0 {
        return Err(Error::config("eval_per_class must be >= 1"));
    }
    let counts = zipf_counts(spec.n_classes, spec.per_class_base, spec.zipf_exponent)?;
    let means = class_means(spec, rng);
    let train = fill_samples(&means, &counts, spec.within_std, spec.input_dim, rng);
    let eval_counts = vec![eval_per_class; spec.n_classes];
    let eval = fill_samples(&means, &eval_counts, spec.within_std, spec.input_dim, rng);
    Ok((train, eval))
}

/// View augmentation strengths.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AugConfig {
    pub noise_std: f64,
    pub mask_prob: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            noise_std: 0.1,
            mask_prob: 0.2,
            scale_lo: 0.8,
            scale_hi: 1.2,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob must be in [0,1]"));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) {
            return Err(Error::config("scale range must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// One augmented view: per-view scale, additive noise, coordinate masking.
pub fn make_view(x: &[f64], cfg: &AugConfig, rng: &mut Rng) -> Vec<f64> {
    let s = if cfg.scale_lo == cfg.scale_hi {
        cfg.scale_lo
    } else {
        rng.uniform(cfg.scale_lo, cfg.scale_hi)
    };
    x.iter()
        .map(|&v| {
            let mut out = v * s;
            if cfg.noise_std > 0.0 {
                out += cfg.noise_std * rng.normal();
            }
            if cfg.mask_prob > 0.0 && rng.bernoulli(cfg.mask_prob) {
                out = 0.0;
            }
            out
        })
        .collect()
}

/// Two independently augmented views of one input row.
pub fn make_views(x: &[f64], cfg: &AugConfig, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    (make_view(x, cfg, rng), make_view(x, cfg, rng))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplerMode {
    Uniform,
    ClassRestricted { classes_per_batch: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub batch_size: usize,
    pub seed: u64,
}

/// Stateful minibatch sampler. Uniform mode walks a reshuffled permutation
/// each epoch; class-restricted mode draws a fresh class subset per batch
/// and samples uniformly (without replacement) from their union.
pub struct Sampler {
    cfg: SamplerConfig,
    rng: Rng,
    permutation: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Sampler> {
        if cfg.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if let SamplerMode::ClassRestricted { classes_per_batch } = cfg.mode {
            if classes_per_batch == 0 {
                return Err(Error::config("classes_per_batch must be >= 1"));
            }
        }
        Ok(Sampler {
            cfg,
            rng: Rng::from_seed(cfg.seed).stream("sampler"),
            permutation: Vec::new(),
            cursor: 0,
        })
    }

    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Vec<usize>> {
        match self.cfg.mode {
            SamplerMode::Uniform => {
                if self.cfg.batch_size > dataset.len() {
                    return Err(Error::Sampling(format!(
                        "batch_size {} exceeds dataset size {}",
                        self.cfg.batch_size,
                        dataset.len()
                    )));
                }
                if self.permutation.len() != dataset.len()
                    || self.cursor + self.cfg.batch_size > self.permutation.len()
                {
                    self.permutation = (0..dataset.len()).collect();
                    self.rng.shuffle(&mut self.permutation);
                    self.cursor = 0;
                }
                let batch =
                    self.permutation[self.cursor..self.cursor + self.cfg.batch_size].to_vec();
                self.cursor += self.cfg.batch_size;
                Ok(batch)
            }
            SamplerMode::ClassRestricted { classes_per_batch } => {
                let by_class = dataset.class_indices();
                let nonempty: Vec<usize> = (0..dataset.n_classes)
                    .filter(|&c| !by_class[c].is_empty())
                    .collect();
                if nonempty.len() < classes_per_batch {
                    return Err(Error::Sampling(format!(
                        "need {} non-empty classes, have {}",
                        classes_per_batch,
                        nonempty.len()
                    )));
                }
                let picks = self.rng.choose_distinct(nonempty.len(), classes_per_batch);
                let mut pool: Vec<usize> = Vec::new();
                for p in picks {
                    pool.extend_from_slice(&by_class[nonempty[p]]);
                }
                if self.cfg.batch_size > pool.len() {
                    return Err(Error::Sampling(format!(
                        "batch_size {} exceeds class-restricted pool of {}",
                        self.cfg.batch_size,
                        pool.len()
                    )));
                }
                let chosen = self.rng.choose_distinct(pool.len(), self.cfg.batch_size);
                Ok(chosen.into_iter().map(|i| pool[i]).collect())
            }
        }
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Parse CIFAR-10 binary batch files: records of one label byte followed by
/// 3072 pixel bytes, pixels scaled to `[0,1]`. With `target_dim` set, each
/// record is reduced by averaging equal contiguous pixel blocks
/// (`3072 % target_dim == 0` required).
pub fn load_cifar10_binary(paths: &[impl AsRef<Path>], target_dim: Option<usize>) -> Result<Dataset> {
    let out_dim = match target_dim {
        Some(d) => {
            if d == 0 || CIFAR_PIXELS % d != 0 {
                return Err(Error::config(format!(
                    "target_dim {d} must divide {CIFAR_PIXELS}"
                )));
            }
            d
        }
        None => CIFAR_PIXELS,
    };
    let block = CIFAR_PIXELS / out_dim;

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                format!(
                    "{}: length {} is not a multiple of {CIFAR_RECORD}",
                    path.as_ref().display(),
                    bytes.len()
                ),
                Some((bytes.len() - bytes.len() % CIFAR_RECORD) as u64),
            ));
        }
        for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0];
            if label > 9 {
                return Err(Error::format(
                    format!("label byte {label} > 9"),
                    Some((rec * CIFAR_RECORD) as u64),
                ));
            }
            labels.push(label as usize);
            let pixels = &chunk[1..];
            for b in 0..out_dim {
                let sum: f64 = pixels[b * block..(b + 1) * block]
                    .iter()
                    .map(|&p| p as f64 / 255.0)
                    .sum();
                inputs.push(sum / block as f64);
            }
        }
    }

    let mut class_counts = vec![0usize; 10];
    for &y in &labels {
        class_counts[y] += 1;
    }
    Ok(Dataset {
        inputs,
        input_dim: out_dim,
        labels,
        n_classes: 10,
        class_counts,
    })
}

const DATASET_MAGIC: &[u8; 8] = b"WLDATA1\n";

/// Headered flat binary export: dims and counts, then row-major 64-bit
/// inputs and 32-bit labels.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.input_dim as u64).to_le_bytes());
    out.extend_from_slice(&(ds.n_classes as u64).to_le_bytes());
    for &c in &ds.class_counts {
        out.extend_from_slice(&(c as u64).to_le_bytes());
    }
    for v in &ds.inputs {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    if r.take(8)? != DATASET_MAGIC {
        return Err(Error::format("bad dataset magic", Some(0)));
    }
    let n = r.u64()? as usize;
    let input_dim = r.u64()? as usize;
    let n_classes = r.u64()? as usize;
    let mut class_counts = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        class_counts.push(r.u64()? as usize);
    }
    let mut inputs = Vec::with_capacity(n * input_dim);
    for _ in 0..n * input_dim {
        inputs.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u32()? as usize);
    }
    let ds = Dataset {
        inputs,
        input_dim,
        labels,
        n_classes,
        class_counts,
    };
    ds.validate()?;
    Ok(ds)
}
