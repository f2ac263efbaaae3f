//! Optimizers, the learning-rate schedule, and the pretraining loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_view, make_views, AugConfig, Dataset, Sampler, SamplerConfig, SamplerMode};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, ntxent_loss, vicreg_loss, SimclrParams, VicregParams};
use crate::model::{Mode, Network, Param};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    Simclr(SimclrParams),
    Vicreg(VicregParams),
    Supervised,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Simclr(_) => "simclr",
            Method::Vicreg(_) => "vicreg",
            Method::Supervised => "supervised",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub cosine_schedule: bool,
    pub warmup_epochs: usize,
    pub sampler_mode: SamplerMode,
    pub aug: AugConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.base_lr < 0.0 {
            return Err(Error::config("base_lr must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs must be < epochs"));
        }
        self.aug.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub final_checksum: u64,
}

/// Closed-form learning rate at a given step: linear warmup to `base_lr`,
/// then a single cosine half-cycle down over the remaining steps (or a
/// constant plateau when `cosine` is off).
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, cosine: bool) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    if !cosine {
        return base_lr;
    }
    let t = (step - warmup_steps) as f64;
    let span = (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t / span).cos())
}

fn grad_of(p: &Param) -> Result<Vec<f64>> {
    let g = p
        .tensor
        .grad()
        .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
    }
    Ok(g)
}

/// SGD with classical momentum and L2 weight decay folded into the
/// gradient; biases and batch-norm affine parameters do not decay.
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> SgdMomentum {
        SgdMomentum {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[Param], lr: f64) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        for (p, buf) in params.iter().zip(self.buffers.iter_mut()) {
            let g = grad_of(p)?;
            let wd = if p.decays { self.weight_decay } else { 0.0 };
            let mut vals = p.tensor.values();
            for i in 0..vals.len() {
                buf[i] = self.momentum * buf[i] + g[i] + wd * vals[i];
                vals[i] -= lr * buf[i];
            }
            p.tensor.set_values(&vals)?;
        }
        Ok(())
    }
}

/// AdamW: adaptive moments with bias correction and decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[Param], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((p, m), v) in params.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = grad_of(p)?;
            let wd = if p.decays { self.weight_decay } else { 0.0 };
            let mut vals = p.tensor.values();
            for i in 0..vals.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                vals[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * vals[i]);
            }
            p.tensor.set_values(&vals)?;
        }
        Ok(())
    }
}

fn batch_tensor(rows: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), dim, data)
}

/// Run the full pretraining loop, mutating `net` in place.
///
/// Each SSL step samples a batch, augments it into two views, and
/// backpropagates the configured loss through projector and backbone;
/// supervised steps use a single view and cross-entropy on the head.
/// Aborts with context on any non-finite loss or gradient.
pub fn pretrain(net: &mut Network, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.input_dim != net.config.input_dim {
        return Err(Error::ShapeMismatch {
            op: "pretrain",
            lhs: vec![dataset.input_dim],
            rhs: vec![net.config.input_dim],
        });
    }
    match cfg.method {
        Method::Supervised => {
            if net.config.head != Some(dataset.n_classes) {
                return Err(Error::config(format!(
                    "supervised training needs a head with {} classes",
                    dataset.n_classes
                )));
            }
        }
        _ => {
            if net.config.projector.out_dim().is_none() {
                return Err(Error::config("SSL training needs a projector"));
            }
        }
    }

    let steps_per_epoch = dataset.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Sampling(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    let mut sampler = Sampler::new(SamplerConfig {
        mode: cfg.sampler_mode,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    })?;
    let mut aug_rng = Rng::from_seed(cfg.seed).stream("aug");
    let mut optimizer = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
    let params = net.trainable_parameters();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for s in 0..steps_per_epoch {
            let batch = sampler.next_batch(dataset)?;
            let loss = match &cfg.method {
                Method::Supervised => {
                    let views: Vec<Vec<f64>> = batch
                        .iter()
                        .map(|&i| make_view(dataset.row(i), &cfg.aug, &mut aug_rng))
                        .collect();
                    let x = batch_tensor(&views, dataset.input_dim)?;
                    let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
                    let h = net.backbone_forward(&x, Mode::Train)?;
                    let logits = net.head_forward(&h)?;
                    cross_entropy(&logits, &labels)?
                }
                method => {
                    let mut views_a = Vec::with_capacity(batch.len());
                    let mut views_b = Vec::with_capacity(batch.len());
                    for &i in &batch {
                        let (a, b) = make_views(dataset.row(i), &cfg.aug, &mut aug_rng);
                        views_a.push(a);
                        views_b.push(b);
                    }
                    let xa = batch_tensor(&views_a, dataset.input_dim)?;
                    let xb = batch_tensor(&views_b, dataset.input_dim)?;
                    let za = net.embed(&xa, Mode::Train)?;
                    let zb = net.embed(&xb, Mode::Train)?;
                    match method {
                        Method::Simclr(p) => ntxent_loss(&za, &zb, p)?,
                        Method::Vicreg(p) => vicreg_loss(&za, &zb, p)?,
                        Method::Supervised => unreachable!(),
                    }
                }
            };
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {epoch} step {s}"
                )));
            }
            loss_sum += value;

            for p in &params {
                p.tensor.zero_grad();
            }
            loss.backward()?;
            let lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr, cfg.cosine_schedule);
            optimizer.step(&params, lr)?;
            last_lr = lr;
            step += 1;
        }
        history.push(EpochRecord {
            mean_loss: loss_sum / steps_per_epoch as f64,
            lr: last_lr,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainHistory {
        epochs: history,
        final_checksum: net.state_checksum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_network, NetworkConfig, ProjectorSpec};

    fn param(name: &str, values: Vec<f64>, decays: bool) -> Param {
        Param {
            name: name.into(),
            tensor: Tensor::from_vec(vec![values.len()], values)
                .unwrap()
                .with_grad(),
            decays,
        }
    }

    fn set_grad(p: &Param, g: Vec<f64>) {
        p.tensor.zero_grad();
        // drive the gradient through a real graph: loss = sum(g .* p)
        let coeff = Tensor::from_vec(vec![g.len()], g).unwrap();
        let loss = p.tensor.mul(&coeff).unwrap().sum().unwrap();
        loss.backward().unwrap();
    }

    #[test]
    fn sgd_zero_momentum_is_plain_descent() {
        let p = param("w", vec![1.0, -2.0], true);
        set_grad(&p, vec![0.5, -0.25]);
        let mut opt = SgdMomentum::new(0.0, 0.0);
        opt.step(std::slice::from_ref(&p), 0.1).unwrap();
        let v = p.tensor.values();
        assert!((v[0] - (1.0 - 0.05)).abs() < 1e-15);
        assert!((v[1] - (-2.0 + 0.025)).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_zero_buffer_no_move() {
        let p = param("w", vec![3.0], true);
        set_grad(&p, vec![0.0]);
        let mut opt = SgdMomentum::new(0.9, 0.0);
        opt.step(std::slice::from_ref(&p), 0.5).unwrap();
        assert_eq!(p.tensor.values(), vec![3.0]);
    }

    #[test]
    fn sgd_momentum_matches_hand_recurrence() {
        // f(w) = w^2, grad = 2w, momentum 0.9
        let p = param("w", vec![1.0], true);
        let mut opt = SgdMomentum::new(0.9, 0.0);
        let lr = 0.1;
        let mut w_ref = 1.0;
        let mut buf = 0.0;
        for _ in 0..2 {
            set_grad(&p, vec![2.0 * p.tensor.values()[0]]);
            opt.step(std::slice::from_ref(&p), lr).unwrap();
            buf = 0.9 * buf + 2.0 * w_ref;
            w_ref -= lr * buf;
            assert!((p.tensor.values()[0] - w_ref).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_missing_grad_is_contract_error() {
        let p = param("w", vec![1.0], true);
        let mut opt = SgdMomentum::new(0.9, 0.0);
        assert!(matches!(
            opt.step(std::slice::from_ref(&p), 0.1),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn adamw_zero_grad_applies_only_decay() {
        let p = param("w", vec![2.0, -4.0], true);
        set_grad(&p, vec![0.0, 0.0]);
        let mut opt = AdamW::new(0.04);
        let lr = 1e-2;
        opt.step(std::slice::from_ref(&p), lr).unwrap();
        let factor = 1.0 - lr * 0.04;
        let v = p.tensor.values();
        assert!((v[0] - 2.0 * factor).abs() < 1e-15);
        assert!((v[1] - (-4.0) * factor).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_direction() {
        let p = param("w", vec![0.0], true);
        set_grad(&p, vec![0.3]);
        let mut opt = AdamW::new(0.0);
        opt.step(std::slice::from_ref(&p), 1e-3).unwrap();
        // first step: m_hat = g, v_hat = g^2, update = -lr * g/(|g| + eps)
        let expected = -1e-3 * 0.3 / (0.3 + 1e-8);
        assert!((p.tensor.values()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adamw_matches_scalar_oracle_over_steps() {
        let p = param("w", vec![1.0], true);
        let mut opt = AdamW::new(0.0);
        let lr = 1e-2;
        let g = 0.7;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut w) = (0.0, 0.0, 1.0);
        for t in 1..=5 {
            set_grad(&p, vec![g]);
            opt.step(std::slice::from_ref(&p), lr).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1f(t));
            let v_hat = v / (1.0 - b2f(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!(
                (p.tensor.values()[0] - w).abs() < 1e-12,
                "step {t}: {} vs {w}",
                p.tensor.values()[0]
            );
        }
        fn b1f(t: usize) -> f64 {
            0.9f64.powf(t as f64)
        }
        fn b2f(t: usize) -> f64 {
            0.999f64.powf(t as f64)
        }
    }

    #[test]
    fn schedule_matches_closed_form() {
        let (total, warm, base) = (100, 10, 0.4);
        for step in 0..total {
            let lr = lr_at(step, total, warm, base, true);
            let expected = if step < warm {
                base * (step + 1) as f64 / warm as f64
            } else {
                let t = (step - warm) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t / (total - warm) as f64).cos())
            };
            assert!((lr - expected).abs() < 1e-12);
        }
        assert_eq!(lr_at(50, 100, 0, 0.3, false), 0.3);
    }

    fn tiny_setup(method: Method, seed: u64) -> (Network, Dataset, TrainConfig) {
        let spec = crate::data::SyntheticSpec {
            n_classes: 2,
            per_class_base: 40,
            input_dim: 8,
            class_sep: 4.0,
            within_std: 0.5,
            zipf_exponent: 0.0,
        };
        let ds = crate::data::gen_synthetic(&spec, &mut Rng::from_seed(100 + seed)).unwrap();
        let net_cfg = NetworkConfig {
            input_dim: 8,
            backbone_hidden: vec![16],
            repr_dim: 12,
            projector: match method {
                Method::Supervised => ProjectorSpec::None,
                _ => ProjectorSpec::Mlp {
                    widths: vec![8, 8],
                    batchnorm: true,
                },
            },
            head: matches!(method, Method::Supervised).then_some(2),
            init_seed: seed,
        };
        let net = init_network(&net_cfg).unwrap();
        let cfg = TrainConfig {
            method,
            epochs: 5,
            batch_size: 16,
            base_lr: 0.05,
            weight_decay: 1e-6,
            momentum: 0.9,
            cosine_schedule: true,
            warmup_epochs: 1,
            sampler_mode: SamplerMode::Uniform,
            aug: AugConfig::default(),
            seed,
        };
        (net, ds, cfg)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (mut net, ds, mut cfg) = tiny_setup(Method::Simclr(SimclrParams::default()), 1);
        cfg.base_lr = 0.0;
        cfg.epochs = 1;
        cfg.warmup_epochs = 0;
        // batch-norm running stats may move in train mode; the optimizer
        // target is the trainable parameters
        let before: Vec<Vec<u64>> = net
            .trainable_parameters()
            .iter()
            .map(|p| p.tensor.values().iter().map(|v| v.to_bits()).collect())
            .collect();
        let history = pretrain(&mut net, &ds, &cfg).unwrap();
        assert_eq!(history.epochs.len(), 1);
        let after: Vec<Vec<u64>> = net
            .trainable_parameters()
            .iter()
            .map(|p| p.tensor.values().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_same_final_checksum() {
        let (mut a, ds, cfg) = tiny_setup(Method::Vicreg(VicregParams::default()), 2);
        let (mut b, _, _) = tiny_setup(Method::Vicreg(VicregParams::default()), 2);
        let ha = pretrain(&mut a, &ds, &cfg).unwrap();
        let hb = pretrain(&mut b, &ds, &cfg).unwrap();
        assert_eq!(ha.final_checksum, hb.final_checksum);
        for (ea, eb) in ha.epochs.iter().zip(&hb.epochs) {
            assert_eq!(ea.mean_loss.to_bits(), eb.mean_loss.to_bits());
        }
    }

    #[test]
    fn simclr_loss_decreases_on_separable_data() {
        let (mut net, ds, mut cfg) = tiny_setup(Method::Simclr(SimclrParams::default()), 3);
        cfg.epochs = 20;
        let history = pretrain(&mut net, &ds, &cfg).unwrap();
        let first = history.epochs.first().unwrap().mean_loss;
        let last = history.epochs.last().unwrap().mean_loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn zero_epochs_rejected() {
        let (mut net, ds, mut cfg) = tiny_setup(Method::Supervised, 4);
        cfg.epochs = 0;
        assert!(pretrain(&mut net, &ds, &cfg).is_err());
    }
}
