//! Runtime verification suite: gradient checks, loss-oracle equivalences,
//! gradient-subspace confinement, collision Monte Carlo, and format
//! round-trips. `widthlab verify` prints one line per check and exits
//! nonzero on any failure.

use widthlab_core::analysis::{
    collision_probability_mc, confinement_update_drift, gradient_confinement_check,
    ConfinementLoss,
};
use widthlab_core::data::{
    gen_synthetic, load_cifar10_binary, load_dataset, save_dataset, Sampler, SamplerConfig,
    SamplerMode, SyntheticSpec,
};
use widthlab_core::evaluation::{load_representations, save_representations, RepresentationMatrix};
use widthlab_core::losses::{cross_entropy, ntxent_loss, vicreg_loss, SimclrParams, VicregParams};
use widthlab_core::model::{
    init_network, load_checkpoint, save_checkpoint, Mode, NetworkConfig, ProjectorSpec,
};
use widthlab_core::tensor::finite_difference_check;
use widthlab_core::training::lr_at;
use widthlab_core::{Rng, Tensor};

use crate::oracle;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: &'static str, outcome: Result<String, String>) -> CheckResult {
        match outcome {
            Ok(detail) => CheckResult {
                name,
                passed: true,
                detail,
            },
            Err(detail) => CheckResult {
                name,
                passed: false,
                detail,
            },
        }
    }
}

const FD_EPS: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;
const ORACLE_TOL: f64 = 1e-10;
const CONFINEMENT_TOL: f64 = 1e-10;

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn rand_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| randn(rng, d)).collect()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    let mut flat = Vec::with_capacity(rows.len() * d);
    for r in rows {
        flat.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), d, flat).unwrap()
}

/// Criterion: autodiff matches central differences for every exported op.
pub fn check_op_gradients() -> Result<String, String> {
    let mut rng = Rng::from_seed(1001);
    let mut worst = 0.0f64;
    let mut run = |err: Result<f64, widthlab_core::Error>| -> Result<(), String> {
        let e = err.map_err(|e| e.to_string())?;
        if e > worst {
            worst = e;
        }
        Ok(())
    };

    let offzero = |rng: &mut Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v = rng.normal();
                v.signum() * (v.abs() + 0.05)
            })
            .collect()
    };

    // matmul / transpose / elementwise / rowwise
    let a = Tensor::matrix(3, 4, randn(&mut rng, 12)).unwrap().with_grad();
    let b = Tensor::matrix(4, 2, randn(&mut rng, 8)).unwrap().with_grad();
    let m = Tensor::matrix(3, 2, randn(&mut rng, 6)).unwrap();
    run(finite_difference_check(
        || a.matmul(&b)?.mul(&m)?.sum(),
        &[a.clone(), b.clone()],
        FD_EPS,
        None,
        &mut rng,
    ))?;

    let x = Tensor::matrix(4, 3, randn(&mut rng, 12)).unwrap().with_grad();
    let row = Tensor::from_vec(vec![3], offzero(&mut rng, 3)).unwrap().with_grad();
    let w = Tensor::matrix(4, 3, randn(&mut rng, 12)).unwrap();
    run(finite_difference_check(
        || {
            x.add_row(&row)?
                .mul_row(&row)?
                .sub_row(&row)?
                .div_row(&row)?
                .mul(&w)?
                .sum()
        },
        &[x.clone(), row.clone()],
        FD_EPS,
        None,
        &mut rng,
    ))?;

    // relu away from the kink, sqrt on positive input
    let xr = Tensor::matrix(4, 4, offzero(&mut rng, 16)).unwrap().with_grad();
    let wr = Tensor::matrix(4, 4, randn(&mut rng, 16)).unwrap();
    run(finite_difference_check(
        || xr.relu()?.mul(&wr)?.sum(),
        &[xr.clone()],
        FD_EPS,
        None,
        &mut rng,
    ))?;
    let xs = Tensor::matrix(3, 3, (0..9).map(|_| rng.normal().abs() + 0.5).collect())
        .unwrap()
        .with_grad();
    run(finite_difference_check(
        || xs.sqrt()?.mean(),
        &[xs.clone()],
        FD_EPS,
        None,
        &mut rng,
    ))?;

    // reductions, concat, normalize, logsumexp, gather
    let p = Tensor::matrix(3, 5, randn(&mut rng, 15)).unwrap().with_grad();
    let q = Tensor::matrix(2, 5, offzero(&mut rng, 10)).unwrap().with_grad();
    let idx = vec![0usize, 3, 1, 4, 2];
    run(finite_difference_check(
        || {
            let cat = p.concat_rows(&q)?;
            let nrm = cat.l2_normalize_rows()?;
            let sims = nrm.matmul(&nrm.transpose()?)?;
            let lse = sims.row_logsumexp(true)?.sum()?;
            let pick = sims.gather_per_row(&idx)?.mean()?;
            let cols = cat.col_mean()?.mul(&cat.col_sum()?)?.sum()?;
            lse.sub(&pick)?.add(&cols.scale(0.1)?)?.add_scalar(0.5)
        },
        &[p.clone(), q.clone()],
        FD_EPS,
        None,
        &mut rng,
    ))?;

    // batch norm, full paths
    let bn = widthlab_core::model::BatchNorm::init(4);
    bn.gamma.set_values(&offzero(&mut rng, 4)).unwrap();
    bn.beta.set_values(&randn(&mut rng, 4)).unwrap();
    let xb = Tensor::matrix(8, 4, randn(&mut rng, 32)).unwrap().with_grad();
    let wb = Tensor::matrix(8, 4, randn(&mut rng, 32)).unwrap();
    run(finite_difference_check(
        || bn.forward(&xb, Mode::Train)?.mul(&wb)?.sum(),
        &[xb.clone(), bn.gamma.clone(), bn.beta.clone()],
        FD_EPS,
        None,
        &mut rng,
    ))?;

    if worst < FD_TOL {
        Ok(format!("max relative error {worst:.3e}"))
    } else {
        Err(format!("max relative error {worst:.3e} >= {FD_TOL:.0e}"))
    }
}

/// Criterion: composed SimCLR/VICReg/cross-entropy gradients through a
/// D=16 network agree with central differences.
pub fn check_composed_loss_gradients() -> Result<String, String> {
    let mut rng = Rng::from_seed(2001);
    let mut worst = 0.0f64;

    let ssl_cfg = NetworkConfig {
        input_dim: 12,
        backbone_hidden: vec![10],
        repr_dim: 16,
        projector: ProjectorSpec::Mlp {
            widths: vec![8, 8],
            batchnorm: true,
        },
        head: None,
        init_seed: 2002,
    };
    let net = init_network(&ssl_cfg).map_err(|e| e.to_string())?;
    let xa = Tensor::matrix(6, 12, randn(&mut rng, 72)).unwrap();
    let xb = Tensor::matrix(6, 12, randn(&mut rng, 72)).unwrap();
    let params: Vec<Tensor> = net.trainable_parameters().into_iter().map(|p| p.tensor).collect();

    let simclr = SimclrParams::default();
    let err = finite_difference_check(
        || {
            let za = net.embed(&xa, Mode::Train)?;
            let zb = net.embed(&xb, Mode::Train)?;
            ntxent_loss(&za, &zb, &simclr)
        },
        &params,
        FD_EPS,
        Some(24),
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    worst = worst.max(err);

    let vicreg = VicregParams::default();
    let err = finite_difference_check(
        || {
            let za = net.embed(&xa, Mode::Train)?;
            let zb = net.embed(&xb, Mode::Train)?;
            vicreg_loss(&za, &zb, &vicreg)
        },
        &params,
        FD_EPS,
        Some(24),
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    worst = worst.max(err);

    let sup_cfg = NetworkConfig {
        projector: ProjectorSpec::None,
        head: Some(3),
        ..ssl_cfg
    };
    let net = init_network(&sup_cfg).map_err(|e| e.to_string())?;
    let labels = vec![0usize, 1, 2, 0, 1, 2];
    let params: Vec<Tensor> = net.trainable_parameters().into_iter().map(|p| p.tensor).collect();
    let err = finite_difference_check(
        || {
            let h = net.backbone_forward(&xa, Mode::Train)?;
            cross_entropy(&net.head_forward(&h)?, &labels)
        },
        &params,
        FD_EPS,
        Some(24),
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    worst = worst.max(err);

    if worst < FD_TOL {
        Ok(format!("max relative error {worst:.3e}"))
    } else {
        Err(format!("max relative error {worst:.3e} >= {FD_TOL:.0e}"))
    }
}

/// Compare an NT-Xent implementation against the graph loss over random
/// batches; returns the maximum absolute deviation.
pub fn ntxent_deviation<F>(reference: F, batches: usize, seed: u64) -> Result<f64, String>
where
    F: Fn(&[Vec<f64>], &[Vec<f64>], f64) -> f64,
{
    let mut rng = Rng::from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let n = 1 + rng.below(8);
        let d = 1 + rng.below(16);
        let za = rand_rows(&mut rng, n, d);
        let zb = rand_rows(&mut rng, n, d);
        let temperature = 0.1 + rng.uniform(0.0, 0.9);
        let graph = ntxent_loss(
            &rows_tensor(&za),
            &rows_tensor(&zb),
            &SimclrParams { temperature },
        )
        .map_err(|e| e.to_string())?
        .item()
        .map_err(|e| e.to_string())?;
        let scalar = reference(&za, &zb, temperature);
        worst = worst.max((graph - scalar).abs());
    }
    Ok(worst)
}

/// Same for VICReg.
pub fn vicreg_deviation<F>(reference: F, batches: usize, seed: u64) -> Result<f64, String>
where
    F: Fn(&[Vec<f64>], &[Vec<f64>], &VicregParams) -> f64,
{
    let mut rng = Rng::from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let n = 2 + rng.below(7);
        let d = 1 + rng.below(16);
        let za = rand_rows(&mut rng, n, d);
        let zb = rand_rows(&mut rng, n, d);
        let params = VicregParams::default();
        let graph = vicreg_loss(&rows_tensor(&za), &rows_tensor(&zb), &params)
            .map_err(|e| e.to_string())?
            .item()
            .map_err(|e| e.to_string())?;
        let scalar = reference(&za, &zb, &params);
        worst = worst.max((graph - scalar).abs());
    }
    Ok(worst)
}

/// Criterion: both SSL losses match the scalar oracles on 100 random
/// batches to 1e-10; cross-entropy matches to 1e-12.
pub fn check_loss_oracles() -> Result<String, String> {
    let nt = ntxent_deviation(
        |za, zb, t| oracle::ntxent_scalar(za, zb, t),
        100,
        3001,
    )?;
    let vi = vicreg_deviation(
        |za, zb, p| {
            oracle::vicreg_scalar(
                za,
                zb,
                p.sim_coeff,
                p.std_coeff,
                p.cov_coeff,
                p.std_epsilon,
                p.std_target,
            )
        },
        100,
        3002,
    )?;

    let mut rng = Rng::from_seed(3003);
    let mut ce = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(8);
        let c = 2 + rng.below(8);
        let logits = rand_rows(&mut rng, n, c);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let graph = cross_entropy(&rows_tensor(&logits), &labels)
            .map_err(|e| e.to_string())?
            .item()
            .map_err(|e| e.to_string())?;
        ce = ce.max((graph - oracle::cross_entropy_scalar(&logits, &labels)).abs());
    }

    if nt < ORACLE_TOL && vi < ORACLE_TOL && ce < 1e-12 {
        Ok(format!("max deviations: ntxent {nt:.2e}, vicreg {vi:.2e}, ce {ce:.2e}"))
    } else {
        Err(format!(
            "oracle deviation too large: ntxent {nt:.2e}, vicreg {vi:.2e}, ce {ce:.2e}"
        ))
    }
}

/// Criterion: backbone gradients live in span(W^T) with a frozen linear
/// projector, across 20 random instances with K in {2,4,8}, D in {16,32}.
pub fn check_confinement_residual() -> Result<String, String> {
    let mut rng = Rng::from_seed(4001);
    let mut worst = 0.0f64;
    let mut count = 0;
    'outer: for &d in &[16usize, 32] {
        for &k in &[2usize, 4, 8] {
            for rep in 0..4 {
                if count >= 20 {
                    break 'outer;
                }
                let d_in = d + 8;
                let n = 6;
                let v = Tensor::matrix(d, d_in, randn(&mut rng, d * d_in))
                    .unwrap()
                    .with_grad();
                let w = Tensor::matrix(k, d, randn(&mut rng, k * d)).unwrap();
                let xa = Tensor::matrix(n, d_in, randn(&mut rng, n * d_in)).unwrap();
                let xb = Tensor::matrix(n, d_in, randn(&mut rng, n * d_in)).unwrap();
                let loss = if rep % 2 == 0 {
                    ConfinementLoss::Simclr(SimclrParams::default())
                } else {
                    ConfinementLoss::Vicreg(VicregParams::default())
                };
                let res = gradient_confinement_check(&v, &w, &xa, &xb, loss)
                    .map_err(|e| e.to_string())?;
                worst = worst.max(res);
                count += 1;
            }
        }
    }
    if worst < CONFINEMENT_TOL {
        Ok(format!("{count} instances, max relative residual {worst:.3e}"))
    } else {
        Err(format!("relative residual {worst:.3e} >= {CONFINEMENT_TOL:.0e}"))
    }
}

/// Criterion: after 100 updates of V with W frozen, the component of
/// V - V_init outside span(W^T) stays below 1e-10.
pub fn check_confinement_drift() -> Result<String, String> {
    let mut rng = Rng::from_seed(4002);
    let (d, d_in, k) = (16usize, 24usize, 4usize);
    let v = Tensor::matrix(d, d_in, randn(&mut rng, d * d_in))
        .unwrap()
        .with_grad();
    let w = Tensor::matrix(k, d, randn(&mut rng, k * d)).unwrap();
    let drift = confinement_update_drift(
        &v,
        &w,
        d_in,
        6,
        ConfinementLoss::Simclr(SimclrParams::default()),
        100,
        0.05,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    if drift < CONFINEMENT_TOL {
        Ok(format!("complement drift {drift:.3e} after 100 steps"))
    } else {
        Err(format!("complement drift {drift:.3e} >= {CONFINEMENT_TOL:.0e}"))
    }
}

/// Criterion: sign-pattern collision rate matches 0.5^K within 4 standard
/// errors at 10^6 pairs, for K in {2,4,8,16}.
pub fn check_collision_mc(n_pairs: usize) -> Result<String, String> {
    let mut rng = Rng::from_seed(5001);
    let mut details = Vec::new();
    for &k in &[2usize, 4, 8, 16] {
        let est = collision_probability_mc(k, n_pairs, &mut rng).map_err(|e| e.to_string())?;
        let dev = (est.empirical_rate - est.analytic_rate).abs();
        if dev >= 4.0 * est.std_error {
            return Err(format!(
                "K={k}: |{} - {}| = {dev:.3e} >= 4*SE ({:.3e})",
                est.empirical_rate,
                est.analytic_rate,
                4.0 * est.std_error
            ));
        }
        details.push(format!("K={k}: dev {:.2}SE", dev / est.std_error));
    }
    Ok(details.join(", "))
}

fn tmp_dir() -> Result<std::path::PathBuf, String> {
    let dir = std::env::temp_dir().join(format!("widthlab-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    Ok(dir)
}

pub fn check_checkpoint_roundtrip() -> Result<String, String> {
    let cfg = NetworkConfig {
        input_dim: 6,
        backbone_hidden: vec![5],
        repr_dim: 4,
        projector: ProjectorSpec::Mlp {
            widths: vec![4, 3],
            batchnorm: true,
        },
        head: Some(2),
        init_seed: 6001,
    };
    let net = init_network(&cfg).map_err(|e| e.to_string())?;
    let dir = tmp_dir()?;
    let path = dir.join("verify.ckpt");
    save_checkpoint(&net, &path).map_err(|e| e.to_string())?;
    let restored = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&path);
    if restored.state_checksum() == net.state_checksum() && restored.config == cfg {
        Ok("bit-exact".into())
    } else {
        Err("checkpoint round-trip mismatch".into())
    }
}

pub fn check_representation_roundtrip() -> Result<String, String> {
    let mut rng = Rng::from_seed(6002);
    let reps = RepresentationMatrix {
        n: 9,
        d: 5,
        reps: (0..45).map(|_| rng.normal().abs()).collect(),
        labels: (0..9).map(|i| i % 3).collect(),
        n_classes: 3,
        source: "verify".into(),
    };
    let dir = tmp_dir()?;
    let path = dir.join("verify.reps");
    save_representations(&reps, &path).map_err(|e| e.to_string())?;
    let back = load_representations(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&path);
    let exact = back.n == reps.n
        && back.d == reps.d
        && back.labels == reps.labels
        && back
            .reps
            .iter()
            .zip(&reps.reps)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if exact {
        Ok("bit-exact".into())
    } else {
        Err("representation round-trip mismatch".into())
    }
}

pub fn check_dataset_roundtrip() -> Result<String, String> {
    let spec = SyntheticSpec {
        n_classes: 4,
        per_class_base: 8,
        input_dim: 5,
        class_sep: 2.0,
        within_std: 0.5,
        zipf_exponent: 0.5,
    };
    let ds = gen_synthetic(&spec, &mut Rng::from_seed(6003)).map_err(|e| e.to_string())?;
    let dir = tmp_dir()?;
    let path = dir.join("verify.ds");
    save_dataset(&ds, &path).map_err(|e| e.to_string())?;
    let back = load_dataset(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&path);
    let exact = back.labels == ds.labels
        && back.class_counts == ds.class_counts
        && back
            .inputs
            .iter()
            .zip(&ds.inputs)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if exact {
        Ok("bit-exact".into())
    } else {
        Err("dataset round-trip mismatch".into())
    }
}

/// Criterion: the CIFAR-10 parser validates record arithmetic on a
/// synthesized three-record fixture, and rejects malformed input.
pub fn check_cifar_fixture() -> Result<String, String> {
    let dir = tmp_dir()?;
    let path = dir.join("verify-cifar.bin");
    let mut bytes = Vec::with_capacity(3073 * 3);
    for (label, fill) in [(0u8, 0u8), (7, 255), (9, 128)] {
        bytes.push(label);
        bytes.extend(std::iter::repeat(fill).take(3072));
    }
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    let ds = load_cifar10_binary(&[&path], Some(64)).map_err(|e| e.to_string())?;
    if ds.len() != 3 || ds.labels != vec![0, 7, 9] || ds.input_dim != 64 {
        let _ = std::fs::remove_file(&path);
        return Err(format!("fixture parsed wrong: N={} labels={:?}", ds.len(), ds.labels));
    }
    let mid = ds.row(1);
    if !mid.iter().all(|&v| (v - 1.0).abs() < 1e-12) {
        let _ = std::fs::remove_file(&path);
        return Err("255-filled record should scale to 1.0".into());
    }

    // truncated file must fail with an offset
    std::fs::write(&path, &bytes[..3073 * 2 + 100]).map_err(|e| e.to_string())?;
    let truncated = load_cifar10_binary(&[&path], None);
    let _ = std::fs::remove_file(&path);
    match truncated {
        Err(widthlab_core::Error::Format { .. }) => Ok("3-record fixture, truncation rejected".into()),
        other => Err(format!("truncated file accepted: {other:?}")),
    }
}

pub fn check_config_roundtrip() -> Result<String, String> {
    let cfg = crate::config::parse_config_str("[train]\nmethod = \"vicreg\"\n")
        .map_err(|e| format!("{e:#}"))?;
    let emitted = cfg.resolved_toml().map_err(|e| format!("{e:#}"))?;
    let reparsed = crate::config::parse_config_str(&emitted).map_err(|e| format!("{e:#}"))?;
    let re_emitted = reparsed.resolved_toml().map_err(|e| format!("{e:#}"))?;
    if emitted == re_emitted {
        Ok("resolved config re-parses identically".into())
    } else {
        Err("resolved config round-trip drifted".into())
    }
}

/// Criterion: a class-restricted sampler never emits more distinct labels
/// than configured, across a full pass of batches.
pub fn check_sampler_cardinality() -> Result<String, String> {
    let spec = SyntheticSpec {
        n_classes: 10,
        per_class_base: 40,
        input_dim: 8,
        class_sep: 3.0,
        within_std: 1.0,
        zipf_exponent: 0.0,
    };
    let ds = gen_synthetic(&spec, &mut Rng::from_seed(7001)).map_err(|e| e.to_string())?;
    let mut sampler = Sampler::new(SamplerConfig {
        mode: SamplerMode::ClassRestricted {
            classes_per_batch: 2,
        },
        batch_size: 32,
        seed: 7002,
    })
    .map_err(|e| e.to_string())?;
    let batches = 500;
    for i in 0..batches {
        let batch = sampler.next_batch(&ds).map_err(|e| e.to_string())?;
        let mut labels: Vec<usize> = batch.iter().map(|&j| ds.labels[j]).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() > 2 {
            return Err(format!("batch {i} had {} distinct labels", labels.len()));
        }
    }
    Ok(format!("{batches} batches, all within 2 classes"))
}

pub fn check_schedule() -> Result<String, String> {
    let (total, warm, base) = (750usize, 50usize, 0.05);
    for step in 0..total {
        let lr = lr_at(step, total, warm, base, true);
        let expected = if step < warm {
            base * (step + 1) as f64 / warm as f64
        } else {
            let t = (step - warm) as f64;
            base * 0.5 * (1.0 + (std::f64::consts::PI * t / (total - warm) as f64).cos())
        };
        if (lr - expected).abs() > 1e-12 {
            return Err(format!("step {step}: lr {lr} vs closed form {expected}"));
        }
    }
    Ok("cosine schedule matches closed form to 1e-12".into())
}

pub fn check_determinism() -> Result<String, String> {
    use widthlab_core::data::AugConfig;
    use widthlab_core::training::{pretrain, Method, TrainConfig};

    let spec = SyntheticSpec {
        n_classes: 3,
        per_class_base: 30,
        input_dim: 8,
        class_sep: 3.0,
        within_std: 0.8,
        zipf_exponent: 0.0,
    };
    let ds = gen_synthetic(&spec, &mut Rng::from_seed(8001)).map_err(|e| e.to_string())?;
    let net_cfg = NetworkConfig {
        input_dim: 8,
        backbone_hidden: vec![12],
        repr_dim: 10,
        projector: ProjectorSpec::Mlp {
            widths: vec![8, 8],
            batchnorm: true,
        },
        head: None,
        init_seed: 8002,
    };
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
        seed: 8003,
    };
    let run = || -> Result<u64, String> {
        let mut net = init_network(&net_cfg).map_err(|e| e.to_string())?;
        let hist = pretrain(&mut net, &ds, &train_cfg).map_err(|e| e.to_string())?;
        Ok(hist.final_checksum)
    };
    let (a, b) = (run()?, run()?);
    if a == b {
        Ok(format!("two runs, identical checksum {a:016x}"))
    } else {
        Err(format!("checksums differ: {a:016x} vs {b:016x}"))
    }
}

/// Run every check; `collision_pairs` trades Monte-Carlo precision for
/// time (the acceptance setting is 1_000_000).
pub fn run_all(collision_pairs: usize) -> Vec<CheckResult> {
    vec![
        CheckResult::from("op-gradients", check_op_gradients()),
        CheckResult::from("composed-loss-gradients", check_composed_loss_gradients()),
        CheckResult::from("loss-oracle-equivalence", check_loss_oracles()),
        CheckResult::from("confinement-residual", check_confinement_residual()),
        CheckResult::from("confinement-drift", check_confinement_drift()),
        CheckResult::from("collision-monte-carlo", check_collision_mc(collision_pairs)),
        CheckResult::from("checkpoint-roundtrip", check_checkpoint_roundtrip()),
        CheckResult::from("representation-roundtrip", check_representation_roundtrip()),
        CheckResult::from("dataset-roundtrip", check_dataset_roundtrip()),
        CheckResult::from("cifar-fixture", check_cifar_fixture()),
        CheckResult::from("config-roundtrip", check_config_roundtrip()),
        CheckResult::from("sampler-cardinality", check_sampler_cardinality()),
        CheckResult::from("lr-schedule", check_schedule()),
        CheckResult::from("determinism", check_determinism()),
    ]
}
