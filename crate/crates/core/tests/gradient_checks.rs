//! Finite-difference verification of every differentiable operation and of
//! the full composed losses, at 64-bit with central differences.

use widthlab_core::data::SyntheticSpec;
use widthlab_core::losses::{cross_entropy, ntxent_loss, vicreg_loss, SimclrParams, VicregParams};
use widthlab_core::model::{init_network, BatchNorm, Mode, NetworkConfig, ProjectorSpec};
use widthlab_core::tensor::finite_difference_check;
use widthlab_core::{Rng, Tensor};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Random values bounded away from zero, for kinked ops.
fn randn_offzero(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.normal();
            v.signum() * (v.abs() + 0.05)
        })
        .collect()
}

#[test]
fn matmul_matches_scalar_loop_oracle() {
    let mut rng = Rng::from_seed(1);
    let (n, p, m) = (3, 4, 2);
    let a = Tensor::matrix(n, p, randn(&mut rng, n * p)).unwrap();
    let b = Tensor::matrix(p, m, randn(&mut rng, p * m)).unwrap();
    let out = a.matmul(&b).unwrap().values();
    let (av, bv) = (a.values(), b.values());
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for k in 0..p {
                s += av[i * p + k] * bv[k * m + j];
            }
            assert!((out[i * m + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = Rng::from_seed(2);
    let a = Tensor::matrix(3, 4, randn(&mut rng, 12)).unwrap().with_grad();
    let b = Tensor::matrix(4, 2, randn(&mut rng, 8)).unwrap().with_grad();
    let m = Tensor::matrix(3, 2, randn(&mut rng, 6)).unwrap();
    let err = finite_difference_check(
        || a.matmul(&b)?.mul(&m)?.sum(),
        &[a.clone(), b.clone()],
        EPS,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "matmul fd error {err}");
}

#[test]
fn elementwise_and_rowwise_gradients() {
    let mut rng = Rng::from_seed(3);
    let x = Tensor::matrix(4, 3, randn(&mut rng, 12)).unwrap().with_grad();
    let y = Tensor::matrix(4, 3, randn(&mut rng, 12)).unwrap().with_grad();
    let row = Tensor::from_vec(vec![3], randn_offzero(&mut rng, 3))
        .unwrap()
        .with_grad();
    let m = Tensor::matrix(4, 3, randn(&mut rng, 12)).unwrap();

    let err = finite_difference_check(
        || {
            let s = x.add(&y)?.sub(&y.mul(&x)?)?;
            let t = s.add_row(&row)?.mul_row(&row)?.sub_row(&row)?.div_row(&row)?;
            t.mul(&m)?.sum()
        },
        &[x.clone(), y.clone(), row.clone()],
        EPS,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "elementwise/rowwise fd error {err}");
}

#[test]
fn relu_gradient_at_nonzero_coordinates() {
    let mut rng = Rng::from_seed(4);
    let x = Tensor::matrix(5, 4, randn_offzero(&mut rng, 20))
        .unwrap()
        .with_grad();
    let m = Tensor::matrix(5, 4, randn(&mut rng, 20)).unwrap();
    let err = finite_difference_check(
        || x.relu()?.mul(&m)?.sum(),
        &[x.clone()],
        EPS,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "relu fd error {err}");
}

#[test]
fn reduction_and_shape_gradients() {
    let mut rng = Rng::from_seed(5);
    let x = Tensor::matrix(4, 3, randn(&mut rng, 12)).unwrap().with_grad();
    let y = Tensor::matrix(2, 3, randn(&mut rng, 6)).unwrap().with_grad();
    let err = finite_difference_check(
        || {
            let cat = x.concat_rows(&y)?;
            let a = cat.col_mean()?.mul(&cat.col_sum()?)?.sum()?;
            let b = cat.transpose()?.mean()?;
            a.add(&b.scale(3.0)?)?.add_scalar(1.0)
        },
        &[x.clone(), y.clone()],
        EPS,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "reduction fd error {err}");
}

#[test]
fn sqrt_gradient() {
    let mut rng = Rng::from_seed(6);
    let x = Tensor::matrix(3, 3, (0..9).map(|_| rng.normal().abs() + 0.5).collect())
        .unwrap()
        .with_grad();
    let m = Tensor::matrix(3, 3, randn(&mut rng, 9)).unwrap();
    let err = finite_difference_check(
        || x.sqrt()?.mul(&m)?.sum(),
        &[x.clone()],
        EPS,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "sqrt fd error {err}");
}

#[test]
fn l2_normalize_gradient() {
    let mut rng = Rng::from_seed(7);
    let x = Tensor::matrix(4, 5, randn_offzero(&mut rng, 20))
        .unwrap()
        .with_grad();
    let m = Tensor::matrix(4, 5, randn(&mut rng, 20)).unwrap();
    let err = finite_difference_check(
        || x.l2_normalize_rows()?.mul(&m)?.sum(),
        &[x.clone()],
        EPS,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "l2 normalize fd error {err}");
}

#[test]
fn logsumexp_and_gather_gradients() {
    let mut rng = Rng::from_seed(8);
    let x = Tensor::matrix(5, 5, randn(&mut rng, 25)).unwrap().with_grad();
    let idx = vec![1usize, 0, 3, 2, 4];
    let err = finite_difference_check(
        || {
            let a = x.row_logsumexp(true)?.sum()?;
            let b = x.row_logsumexp(false)?.mean()?;
            let c = x.gather_per_row(&idx)?.sum()?;
            a.add(&b)?.sub(&c)
        },
        &[x.clone()],
        EPS,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "logsumexp/gather fd error {err}");
}

#[test]
fn batch_norm_gradient_through_all_paths() {
    let mut rng = Rng::from_seed(9);
    let bn = BatchNorm::init(4);
    bn.gamma.set_values(&randn_offzero(&mut rng, 4)).unwrap();
    bn.beta.set_values(&randn(&mut rng, 4)).unwrap();
    let x = Tensor::matrix(8, 4, randn(&mut rng, 32)).unwrap().with_grad();
    let m = Tensor::matrix(8, 4, randn(&mut rng, 32)).unwrap();
    let err = finite_difference_check(
        || bn.forward(&x, Mode::Train)?.mul(&m)?.sum(),
        &[x.clone(), bn.gamma.clone(), bn.beta.clone()],
        EPS,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "batch norm fd error {err}");
}

fn d16_network(projector: ProjectorSpec, head: Option<usize>, seed: u64) -> NetworkConfig {
    NetworkConfig {
        input_dim: 12,
        backbone_hidden: vec![10],
        repr_dim: 16,
        projector,
        head,
        init_seed: seed,
    }
}

#[test]
fn composed_simclr_loss_gradients() {
    let cfg = d16_network(
        ProjectorSpec::Mlp {
            widths: vec![8, 8],
            batchnorm: true,
        },
        None,
        41,
    );
    let net = init_network(&cfg).unwrap();
    let mut rng = Rng::from_seed(42);
    let xa = Tensor::matrix(6, 12, randn(&mut rng, 72)).unwrap();
    let xb = Tensor::matrix(6, 12, randn(&mut rng, 72)).unwrap();
    let params: Vec<Tensor> = net
        .trainable_parameters()
        .into_iter()
        .map(|p| p.tensor)
        .collect();
    let simclr = SimclrParams::default();
    let err = finite_difference_check(
        || {
            let za = net.embed(&xa, Mode::Train)?;
            let zb = net.embed(&xb, Mode::Train)?;
            ntxent_loss(&za, &zb, &simclr)
        },
        &params,
        EPS,
        Some(24),
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "composed SimCLR fd error {err}");
}

#[test]
fn composed_vicreg_loss_gradients() {
    let cfg = d16_network(
        ProjectorSpec::Mlp {
            widths: vec![8, 8],
            batchnorm: true,
        },
        None,
        43,
    );
    let net = init_network(&cfg).unwrap();
    let mut rng = Rng::from_seed(44);
    let xa = Tensor::matrix(6, 12, randn(&mut rng, 72)).unwrap();
    let xb = Tensor::matrix(6, 12, randn(&mut rng, 72)).unwrap();
    let vicreg = VicregParams::default();
    let params: Vec<Tensor> = net
        .trainable_parameters()
        .into_iter()
        .map(|p| p.tensor)
        .collect();
    let err = finite_difference_check(
        || {
            let za = net.embed(&xa, Mode::Train)?;
            let zb = net.embed(&xb, Mode::Train)?;
            vicreg_loss(&za, &zb, &vicreg)
        },
        &params,
        EPS,
        Some(24),
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "composed VICReg fd error {err}");
}

#[test]
fn vicreg_dead_bias_directions_are_analytically_zero() {
    // With a batch-normed projector, the pre-BN bias acts as a constant
    // column shift that centering removes, and the output bias is removed
    // by VICReg's shift invariance. Autodiff must agree to machine
    // precision.
    let cfg = d16_network(
        ProjectorSpec::Mlp {
            widths: vec![8, 8],
            batchnorm: true,
        },
        None,
        53,
    );
    let net = init_network(&cfg).unwrap();
    let mut rng = Rng::from_seed(54);
    let xa = Tensor::matrix(6, 12, randn(&mut rng, 72)).unwrap();
    let xb = Tensor::matrix(6, 12, randn(&mut rng, 72)).unwrap();
    let params = net.trainable_parameters();
    for p in &params {
        p.tensor.zero_grad();
    }
    let za = net.embed(&xa, Mode::Train).unwrap();
    let zb = net.embed(&xb, Mode::Train).unwrap();
    vicreg_loss(&za, &zb, &VicregParams::default())
        .unwrap()
        .backward()
        .unwrap();
    for name in ["projector.0.bias", "projector.1.bias"] {
        let p = params.iter().find(|p| p.name == name).unwrap();
        let worst = p
            .tensor
            .grad()
            .unwrap()
            .iter()
            .fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(worst < 1e-12, "{name} grad {worst}");
    }
}

#[test]
fn composed_cross_entropy_gradients() {
    let cfg = d16_network(ProjectorSpec::None, Some(3), 45);
    let net = init_network(&cfg).unwrap();
    let mut rng = Rng::from_seed(46);
    let x = Tensor::matrix(6, 12, randn(&mut rng, 72)).unwrap();
    let labels = vec![0usize, 1, 2, 0, 1, 2];
    let params: Vec<Tensor> = net
        .trainable_parameters()
        .into_iter()
        .map(|p| p.tensor)
        .collect();
    let err = finite_difference_check(
        || {
            let h = net.backbone_forward(&x, Mode::Train)?;
            let logits = net.head_forward(&h)?;
            cross_entropy(&logits, &labels)
        },
        &params,
        EPS,
        Some(24),
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "composed cross-entropy fd error {err}");
}

#[test]
fn two_layer_mlp_cross_entropy_check() {
    // the gradient-checker exercised on its own documented example
    let cfg = NetworkConfig {
        input_dim: 6,
        backbone_hidden: vec![8],
        repr_dim: 5,
        projector: ProjectorSpec::None,
        head: Some(2),
        init_seed: 47,
    };
    let net = init_network(&cfg).unwrap();
    let mut rng = Rng::from_seed(48);
    let x = Tensor::matrix(4, 6, randn(&mut rng, 24)).unwrap();
    let labels = vec![0usize, 1, 1, 0];
    let params: Vec<Tensor> = net
        .trainable_parameters()
        .into_iter()
        .map(|p| p.tensor)
        .collect();
    let err = finite_difference_check(
        || {
            let h = net.backbone_forward(&x, Mode::Train)?;
            cross_entropy(&net.head_forward(&h)?, &labels)
        },
        &params,
        EPS,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "2-layer MLP fd error {err}");
}

#[test]
fn training_forward_and_gradients_are_deterministic() {
    use widthlab_core::data::{gen_synthetic, AugConfig, SamplerMode};
    use widthlab_core::training::{pretrain, Method, TrainConfig};

    let spec = SyntheticSpec {
        n_classes: 3,
        per_class_base: 30,
        input_dim: 10,
        class_sep: 3.0,
        within_std: 0.8,
        zipf_exponent: 0.0,
    };
    let ds = gen_synthetic(&spec, &mut Rng::from_seed(50)).unwrap();
    let cfg = d16_network(
        ProjectorSpec::Mlp {
            widths: vec![8, 8],
            batchnorm: true,
        },
        None,
        51,
    );
    let train_cfg = TrainConfig {
        method: Method::Simclr(SimclrParams::default()),
        epochs: 3,
        batch_size: 16,
        base_lr: 0.05,
        weight_decay: 1e-6,
        momentum: 0.9,
        cosine_schedule: true,
        warmup_epochs: 1,
        sampler_mode: SamplerMode::Uniform,
        aug: AugConfig::default(),
        seed: 52,
    };
    let mut run = |_: ()| {
        let mut cfg_local = cfg.clone();
        cfg_local.input_dim = 10;
        let mut net = init_network(&cfg_local).unwrap();
        let hist = pretrain(&mut net, &ds, &train_cfg).unwrap();
        (hist.final_checksum, hist.epochs.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>())
    };
    let (ca, la) = run(());
    let (cb, lb) = run(());
    assert_eq!(ca, cb);
    assert_eq!(la, lb);
}
