//! Frozen-representation extraction and probing.
//!
//! Probes only ever see a [`RepresentationMatrix`]; the backbone that
//! produced it is never touched, so "frozen" holds by construction.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::{ByteReader, Linear, Mode, Network, Param};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::AdamW;

/// Frozen backbone outputs with their labels: the unit of all analysis.
#[derive(Debug, Clone)]
pub struct RepresentationMatrix {
    pub n: usize,
    pub d: usize,
    /// Row-major `n x d`, non-negative for post-ReLU representations.
    pub reps: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub source: String,
}

impl RepresentationMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.reps[i * self.d..(i + 1) * self.d]
    }
}

/// Run the backbone in eval mode over a whole dataset; the projector is
/// never applied.
pub fn extract_representations(net: &Network, dataset: &Dataset) -> Result<RepresentationMatrix> {
    dataset.validate()?;
    if dataset.input_dim != net.config.input_dim {
        return Err(Error::ShapeMismatch {
            op: "extract_representations",
            lhs: vec![dataset.input_dim],
            rhs: vec![net.config.input_dim],
        });
    }
    let x = Tensor::matrix(dataset.len(), dataset.input_dim, dataset.inputs.clone())?;
    let h = net.backbone_forward(&x, Mode::Eval)?;
    Ok(RepresentationMatrix {
        n: dataset.len(),
        d: net.config.repr_dim,
        reps: h.values(),
        labels: dataset.labels.clone(),
        n_classes: dataset.n_classes,
        source: format!("net:{:016x}", net.state_checksum()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    Linear,
    /// Hidden widths; an empty list means the default `[d, d]`, giving
    /// three affine layers in total.
    Mlp(Vec<usize>),
}

impl ProbeKind {
    pub fn label(&self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp(_) => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stratified fraction of training rows to use (semi-supervised analog).
    pub label_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.04,
            label_fraction: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe_kind: String,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    /// Epochs actually run (early stop on training-loss plateau).
    pub epochs_run: usize,
    pub seed: u64,
}

const PLATEAU_REL_IMPROVEMENT: f64 = 1e-5;
const PLATEAU_PATIENCE: usize = 5;

struct Probe {
    layers: Vec<Linear>,
}

impl Probe {
    fn init(kind: &ProbeKind, in_dim: usize, classes: usize, rng: &mut Rng) -> Probe {
        let widths: Vec<usize> = match kind {
            ProbeKind::Linear => vec![],
            ProbeKind::Mlp(w) if w.is_empty() => vec![in_dim, in_dim],
            ProbeKind::Mlp(w) => w.clone(),
        };
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for &w in &widths {
            layers.push(Linear::init(prev, w, rng));
            prev = w;
        }
        // zero output layer: the AdamW movement at probe learning rates is
        // small, and a random final layer would drown it
        layers.push(Linear::zeros(prev, classes));
        Probe { layers }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    fn params(&self) -> Vec<Param> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                vec![
                    Param {
                        name: format!("probe.{i}.weight"),
                        tensor: l.weight.clone(),
                        decays: true,
                    },
                    Param {
                        name: format!("probe.{i}.bias"),
                        tensor: l.bias.clone(),
                        decays: false,
                    },
                ]
            })
            .collect()
    }
}

/// Argmax with ties broken toward the lowest class index.
fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(probe: &Probe, reps: &RepresentationMatrix) -> Result<f64> {
    if reps.n == 0 {
        return Err(Error::EmptyBatch);
    }
    let x = Tensor::matrix(reps.n, reps.d, reps.reps.clone())?;
    let logits = probe.forward(&x)?;
    let vals = logits.values();
    let c = logits.shape()[1];
    let correct = (0..reps.n)
        .filter(|&i| argmax_row(&vals[i * c..(i + 1) * c]) == reps.labels[i])
        .count();
    Ok(correct as f64 / reps.n as f64)
}

/// Per-class stratified subset of a representation matrix.
pub fn stratified_fraction(
    reps: &RepresentationMatrix,
    fraction: f64,
    rng: &mut Rng,
) -> Result<RepresentationMatrix> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::config("label_fraction must be in (0, 1]"));
    }
    if fraction == 1.0 {
        return Ok(reps.clone());
    }
    let mut by_class = vec![Vec::new(); reps.n_classes];
    for (i, &y) in reps.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = Vec::new();
    for idx in by_class {
        if idx.is_empty() {
            continue;
        }
        let k = ((idx.len() as f64 * fraction).round() as usize).max(1);
        let picks = rng.choose_distinct(idx.len(), k.min(idx.len()));
        keep.extend(picks.into_iter().map(|p| idx[p]));
    }
    keep.sort_unstable();
    let mut out_reps = Vec::with_capacity(keep.len() * reps.d);
    let mut out_labels = Vec::with_capacity(keep.len());
    for &i in &keep {
        out_reps.extend_from_slice(reps.row(i));
        out_labels.push(reps.labels[i]);
    }
    Ok(RepresentationMatrix {
        n: keep.len(),
        d: reps.d,
        reps: out_reps,
        labels: out_labels,
        n_classes: reps.n_classes,
        source: format!("{}:frac{}", reps.source, fraction),
    })
}

/// Train a classifier on frozen representations with AdamW and report
/// train/eval accuracy. The representations are inputs, never parameters.
pub fn train_probe(
    train: &RepresentationMatrix,
    eval: &RepresentationMatrix,
    kind: &ProbeKind,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.d != eval.d {
        return Err(Error::ShapeMismatch {
            op: "train_probe",
            lhs: vec![train.d],
            rhs: vec![eval.d],
        });
    }
    if train.n == 0 {
        return Err(Error::EmptyBatch);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("probe epochs and batch_size must be >= 1"));
    }
    let classes = train.n_classes.max(eval.n_classes);
    if classes == 0 {
        return Err(Error::config("probe needs at least one class"));
    }

    let root = Rng::from_seed(cfg.seed);
    let train = stratified_fraction(train, cfg.label_fraction, &mut root.stream("probe-subset"))?;

    let mut init_rng = root.stream("probe-init");
    let probe = Probe::init(kind, train.d, classes, &mut init_rng);
    let params = probe.params();
    let mut optimizer = AdamW::new(cfg.weight_decay);
    let mut order_rng = root.stream("probe-order");

    let mut order: Vec<usize> = (0..train.n).collect();
    let mut best_loss = f64::INFINITY;
    let mut plateau = 0usize;
    let mut epochs_run = 0usize;
    for _ in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut rows = Vec::with_capacity(chunk.len() * train.d);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                rows.extend_from_slice(train.row(i));
                labels.push(train.labels[i]);
            }
            let x = Tensor::matrix(chunk.len(), train.d, rows)?;
            let logits = probe.forward(&x)?;
            let loss = cross_entropy(&logits, &labels)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("probe loss {value}")));
            }
            loss_sum += value;
            batches += 1;
            for p in &params {
                p.tensor.zero_grad();
            }
            loss.backward()?;
            optimizer.step(&params, cfg.lr)?;
        }
        epochs_run += 1;
        let epoch_loss = loss_sum / batches as f64;
        let improvement = (best_loss - epoch_loss) / best_loss.abs().max(1e-12);
        if improvement < PLATEAU_REL_IMPROVEMENT {
            plateau += 1;
            if plateau >= PLATEAU_PATIENCE {
                break;
            }
        } else {
            plateau = 0;
        }
        best_loss = best_loss.min(epoch_loss);
    }

    Ok(ProbeResult {
        probe_kind: kind.label().to_string(),
        train_accuracy: accuracy(&probe, &train)?,
        eval_accuracy: accuracy(&probe, eval)?,
        epochs_run,
        seed: cfg.seed,
    })
}

/// Probe the same frozen network across a list of downstream tasks.
pub fn transfer_eval(
    net: &Network,
    tasks: &[(Dataset, Dataset)],
    kind: &ProbeKind,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    tasks
        .iter()
        .map(|(train_ds, eval_ds)| {
            let train = extract_representations(net, train_ds)?;
            let eval = extract_representations(net, eval_ds)?;
            train_probe(&train, &eval, kind, cfg)
        })
        .collect()
}

const REPM_MAGIC: &[u8; 8] = b"WLREPM1\n";

/// Headered binary export: N, D, row-major 64-bit floats, 32-bit labels.
pub fn save_representations(reps: &RepresentationMatrix, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(REPM_MAGIC);
    out.extend_from_slice(&(reps.n as u64).to_le_bytes());
    out.extend_from_slice(&(reps.d as u64).to_le_bytes());
    for v in &reps.reps {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &reps.labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_representations(path: &Path) -> Result<RepresentationMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    if r.take(8)? != REPM_MAGIC {
        return Err(Error::format("bad representation-matrix magic", Some(0)));
    }
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let mut reps = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        reps.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u32()? as usize);
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(RepresentationMatrix {
        n,
        d,
        reps,
        labels,
        n_classes,
        source: path.display().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_network, NetworkConfig, ProjectorSpec};

    fn one_hot_reps(n_per_class: usize, classes: usize) -> RepresentationMatrix {
        let n = n_per_class * classes;
        let mut reps = vec![0.0; n * classes];
        let mut labels = Vec::with_capacity(n);
        for c in 0..classes {
            for i in 0..n_per_class {
                let row = c * n_per_class + i;
                reps[row * classes + c] = 1.0;
                labels.push(c);
            }
        }
        RepresentationMatrix {
            n,
            d: classes,
            reps,
            labels,
            n_classes: classes,
            source: "test".into(),
        }
    }

    #[test]
    fn one_hot_reps_reach_perfect_accuracy() {
        let train = one_hot_reps(30, 4);
        let eval = one_hot_reps(10, 4);
        let result = train_probe(&train, &eval, &ProbeKind::Linear, &ProbeConfig::default())
            .unwrap();
        assert_eq!(result.eval_accuracy, 1.0);
    }

    #[test]
    fn uninformative_reps_give_chance_accuracy() {
        let mut rng = Rng::from_seed(5);
        let classes = 10;
        let make = |n: usize, rng: &mut Rng| RepresentationMatrix {
            n,
            d: 16,
            reps: (0..n * 16).map(|_| rng.normal().abs()).collect(),
            labels: (0..n).map(|i| i % classes).collect(),
            n_classes: classes,
            source: "noise".into(),
        };
        let train = make(1000, &mut rng);
        let eval = make(1000, &mut rng);
        let result = train_probe(&train, &eval, &ProbeKind::Linear, &ProbeConfig::default())
            .unwrap();
        let p = 1.0 / classes as f64;
        let sigma = (p * (1.0 - p) / eval.n as f64).sqrt();
        assert!(
            (result.eval_accuracy - p).abs() < 3.0 * sigma + 0.02,
            "accuracy {} too far from chance",
            result.eval_accuracy
        );
    }

    #[test]
    fn well_separated_gaussians_probe_cleanly() {
        // two classes, means 6 sigma apart on each of two contrast coords
        let mut rng = Rng::from_seed(6);
        let make = |n: usize, rng: &mut Rng| {
            let mut reps = Vec::with_capacity(n * 4);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 2;
                let (hi, lo) = if class == 0 { (7.0, 1.0) } else { (1.0, 7.0) };
                reps.push((hi + rng.normal()).max(0.0));
                reps.push((lo + rng.normal()).max(0.0));
                for _ in 2..4 {
                    reps.push(rng.normal().abs());
                }
                labels.push(class);
            }
            RepresentationMatrix {
                n,
                d: 4,
                reps,
                labels,
                n_classes: 2,
                source: "gauss".into(),
            }
        };
        let train = make(600, &mut rng);
        let eval = make(600, &mut rng);
        let result = train_probe(&train, &eval, &ProbeKind::Linear, &ProbeConfig::default())
            .unwrap();
        assert!(result.eval_accuracy >= 0.99, "{}", result.eval_accuracy);
    }

    #[test]
    fn probe_is_deterministic() {
        let train = one_hot_reps(20, 3);
        let eval = one_hot_reps(5, 3);
        let cfg = ProbeConfig {
            seed: 42,
            ..ProbeConfig::default()
        };
        let a = train_probe(&train, &eval, &ProbeKind::Mlp(vec![]), &cfg).unwrap();
        let b = train_probe(&train, &eval, &ProbeKind::Mlp(vec![]), &cfg).unwrap();
        assert_eq!(a.train_accuracy.to_bits(), b.train_accuracy.to_bits());
        assert_eq!(a.eval_accuracy.to_bits(), b.eval_accuracy.to_bits());
        assert_eq!(a.epochs_run, b.epochs_run);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let train = one_hot_reps(5, 3);
        let mut eval = one_hot_reps(5, 3);
        eval.d = 2;
        eval.reps.truncate(eval.n * 2);
        assert!(train_probe(&train, &eval, &ProbeKind::Linear, &ProbeConfig::default()).is_err());
    }

    fn tiny_net() -> Network {
        init_network(&NetworkConfig {
            input_dim: 6,
            backbone_hidden: vec![8],
            repr_dim: 5,
            projector: ProjectorSpec::Linear { out_dim: 3 },
            head: None,
            init_seed: 17,
        })
        .unwrap()
    }

    #[test]
    fn extraction_is_nonnegative_and_projector_free() {
        let net = tiny_net();
        let spec = crate::data::SyntheticSpec {
            n_classes: 3,
            per_class_base: 10,
            input_dim: 6,
            class_sep: 2.0,
            within_std: 1.0,
            zipf_exponent: 0.0,
        };
        let ds = crate::data::gen_synthetic(&spec, &mut Rng::from_seed(0)).unwrap();
        let reps = extract_representations(&net, &ds).unwrap();
        assert_eq!(reps.d, 5);
        assert!(reps.reps.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn empty_dataset_extracts_empty_matrix() {
        let net = tiny_net();
        let ds = Dataset {
            inputs: vec![],
            input_dim: 6,
            labels: vec![],
            n_classes: 3,
            class_counts: vec![0, 0, 0],
        };
        let reps = extract_representations(&net, &ds).unwrap();
        assert_eq!(reps.n, 0);
        assert_eq!(reps.d, 5);
    }

    #[test]
    fn probing_leaves_backbone_untouched() {
        let net = tiny_net();
        let spec = crate::data::SyntheticSpec {
            n_classes: 3,
            per_class_base: 20,
            input_dim: 6,
            class_sep: 3.0,
            within_std: 0.5,
            zipf_exponent: 0.0,
        };
        let mut rng = Rng::from_seed(1);
        let (train_ds, eval_ds) = crate::data::gen_synthetic_pair(&spec, 10, &mut rng).unwrap();
        let before = net.state_checksum();
        let results = transfer_eval(
            &net,
            &[(train_ds, eval_ds)],
            &ProbeKind::Linear,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(net.state_checksum(), before);
    }

    #[test]
    fn representation_roundtrip_bit_exact() {
        let reps = one_hot_reps(7, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reps.bin");
        save_representations(&reps, &path).unwrap();
        let back = load_representations(&path).unwrap();
        assert_eq!(back.n, reps.n);
        assert_eq!(back.d, reps.d);
        assert_eq!(back.labels, reps.labels);
        for (a, b) in back.reps.iter().zip(&reps.reps) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn stratified_fraction_keeps_all_classes() {
        let reps = one_hot_reps(40, 5);
        let sub = stratified_fraction(&reps, 0.1, &mut Rng::from_seed(3)).unwrap();
        assert_eq!(sub.n, 5 * 4);
        let mut seen = vec![false; 5];
        for &y in &sub.labels {
            seen[y] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
