//! Measurement corollaries on trained representations.
//!
//! Sparsity counts exact floating zeros (valid because the backbone output
//! is post-ReLU), binarization maps every strictly positive entry to one,
//! the collision Monte Carlo checks the `0.5^K` quantization-collision rate
//! under the symmetric sign model, per-dimension Jacobian norms measure
//! input sensitivity, and the confinement check verifies that with a frozen
//! linear projector the backbone gradient lives in the span of the
//! projector's transpose.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::RepresentationMatrix;
use crate::losses::{ntxent_loss, vicreg_loss, SimclrParams, VicregParams};
use crate::model::{Mode, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsitySummary {
    pub median_zero_fraction: f64,
    pub mean_zero_fraction: f64,
    /// Fraction of examples with at least half of their entries at zero.
    pub frac_examples_half_zero: f64,
}

#[derive(Debug, Clone)]
pub struct SparsityProfile {
    pub per_example_zero_fraction: Vec<f64>,
    /// Same values sorted ascending (the curve plotted in sweeps).
    pub sorted_curve: Vec<f64>,
    pub per_dimension_zero_count: Vec<usize>,
    pub summary: SparsitySummary,
}

/// Count exact zeros per example and per dimension. Zero means bitwise
/// `0.0`; post-ReLU representations produce exact zeros, so no threshold
/// parameter is involved.
pub fn sparsity_profile(reps: &RepresentationMatrix) -> Result<SparsityProfile> {
    if reps.n == 0 || reps.d == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut per_example = Vec::with_capacity(reps.n);
    let mut per_dimension = vec![0usize; reps.d];
    for i in 0..reps.n {
        let row = reps.row(i);
        let mut zeros = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v == 0.0 {
                zeros += 1;
                per_dimension[j] += 1;
            }
        }
        per_example.push(zeros as f64 / reps.d as f64);
    }
    let mut sorted = per_example.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    let half = per_example.iter().filter(|&&f| f >= 0.5).count() as f64 / per_example.len() as f64;
    Ok(SparsityProfile {
        per_example_zero_fraction: per_example,
        sorted_curve: sorted,
        per_dimension_zero_count: per_dimension,
        summary: SparsitySummary {
            median_zero_fraction: median,
            mean_zero_fraction: mean,
            frac_examples_half_zero: half,
        },
    })
}

/// CSV bodies for the sparsity profile: one row per example and one row per
/// dimension.
pub fn sparsity_csv(profile: &SparsityProfile) -> (String, String) {
    let mut per_example = String::from("example,zero_fraction\n");
    for (i, f) in profile.per_example_zero_fraction.iter().enumerate() {
        per_example.push_str(&format!("{i},{f}\n"));
    }
    let mut per_dimension = String::from("dimension,zero_count\n");
    for (j, c) in profile.per_dimension_zero_count.iter().enumerate() {
        per_dimension.push_str(&format!("{j},{c}\n"));
    }
    (per_example, per_dimension)
}

/// Set every strictly positive entry to one. Rejects matrices with negative
/// entries, which cannot be post-ReLU representations.
pub fn binarize(reps: &RepresentationMatrix) -> Result<RepresentationMatrix> {
    if let Some(v) = reps.reps.iter().find(|&&v| v < 0.0) {
        return Err(Error::Contract(format!(
            "binarize expects non-negative entries, found {v}"
        )));
    }
    Ok(RepresentationMatrix {
        n: reps.n,
        d: reps.d,
        reps: reps
            .reps
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect(),
        labels: reps.labels.clone(),
        n_classes: reps.n_classes,
        source: format!("{}:binarized", reps.source),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollisionEstimate {
    pub k: usize,
    pub n_pairs: usize,
    pub empirical_rate: f64,
    pub analytic_rate: f64,
    /// Binomial standard error at the analytic rate.
    pub std_error: f64,
}

/// Monte-Carlo estimate of the probability that two independent standard
/// Gaussian `K`-vectors share their full sign pattern. The analytic value
/// is `0.5^K`.
pub fn collision_probability_mc(k: usize, n_pairs: usize, rng: &mut Rng) -> Result<CollisionEstimate> {
    if k == 0 || n_pairs == 0 {
        return Err(Error::config("collision check needs k >= 1 and n_pairs >= 1"));
    }
    let mut collisions = 0usize;
    for _ in 0..n_pairs {
        let mut same = true;
        for _ in 0..k {
            let a = rng.normal();
            let b = rng.normal();
            if (a > 0.0) != (b > 0.0) {
                same = false;
                // keep draining draws so the stream position is data-independent
            }
        }
        if same {
            collisions += 1;
        }
    }
    let analytic = 0.5f64.powi(k as i32);
    Ok(CollisionEstimate {
        k,
        n_pairs,
        empirical_rate: collisions as f64 / n_pairs as f64,
        analytic_rate: analytic,
        std_error: (analytic * (1.0 - analytic) / n_pairs as f64).sqrt(),
    })
}

/// Mean L2 norm of the input Jacobian for each representation dimension.
///
/// For dimension `j`, one backward pass seeded from the sum of column `j`
/// yields, per sample, the gradient of `h_j` with respect to that input
/// row; the per-sample norms are averaged over the batch. Returns the `D`
/// per-dimension means and their overall mean.
pub fn jacobian_dim_norms(net: &Network, inputs: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let in_dim = net.config.input_dim;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if inputs.len() != n * in_dim {
        return Err(Error::ShapeMismatch {
            op: "jacobian_dim_norms",
            lhs: vec![n, in_dim],
            rhs: vec![inputs.len()],
        });
    }
    let d = net.config.repr_dim;
    let mut norms = Vec::with_capacity(d);
    for j in 0..d {
        let x = Tensor::matrix(n, in_dim, inputs.to_vec())?.with_grad();
        let h = net.backbone_forward(&x, Mode::Eval)?;
        let mut mask = vec![0.0; n * d];
        for i in 0..n {
            mask[i * d + j] = 1.0;
        }
        let mask = Tensor::matrix(n, d, mask)?;
        h.mul(&mask)?.sum()?.backward()?;
        let g = x.grad().expect("input requires grad");
        let mean_norm = (0..n)
            .map(|i| {
                g[i * in_dim..(i + 1) * in_dim]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / n as f64;
        norms.push(mean_norm);
    }
    let mean = norms.iter().sum::<f64>() / d as f64;
    Ok((norms, mean))
}

/// Loss driving the confinement checks.
#[derive(Debug, Clone, Copy)]
pub enum ConfinementLoss {
    Simclr(SimclrParams),
    Vicreg(VicregParams),
}

fn confinement_forward(
    v: &Tensor,
    w: &Tensor,
    x_a: &Tensor,
    x_b: &Tensor,
    loss: ConfinementLoss,
) -> Result<Tensor> {
    let z_a = x_a.matmul(&v.transpose()?)?.matmul(&w.transpose()?)?;
    let z_b = x_b.matmul(&v.transpose()?)?.matmul(&w.transpose()?)?;
    match loss {
        ConfinementLoss::Simclr(p) => ntxent_loss(&z_a, &z_b, &p),
        ConfinementLoss::Vicreg(p) => vicreg_loss(&z_a, &z_b, &p),
    }
}

/// Orthonormal basis for the column space of a `rows x cols` matrix via
/// modified Gram-Schmidt; returns column-major basis vectors.
fn orthonormal_columns(m: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|r| m[r * cols + c]).collect();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// Project each column of `g` (`rows x cols`) onto the orthogonal
/// complement of `span(basis)` and return the Frobenius norms of the
/// residual and of `g` itself.
fn complement_residual(g: &[f64], rows: usize, cols: usize, basis: &[Vec<f64>]) -> (f64, f64) {
    let mut residual_sq = 0.0;
    let mut total_sq = 0.0;
    for c in 0..cols {
        let col: Vec<f64> = (0..rows).map(|r| g[r * cols + c]).collect();
        total_sq += col.iter().map(|x| x * x).sum::<f64>();
        let mut perp = col.clone();
        for q in basis {
            let dot: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
            for (pi, qi) in perp.iter_mut().zip(q) {
                *pi -= dot * qi;
            }
        }
        residual_sq += perp.iter().map(|x| x * x).sum::<f64>();
    }
    (residual_sq.sqrt(), total_sq.sqrt())
}

/// With a linear backbone `V` and frozen linear projector `W`, the gradient
/// of any loss on `W V x` has all its columns inside `span(W^T)`. Returns
/// the relative Frobenius residual of the gradient outside that span.
pub fn gradient_confinement_check(
    v: &Tensor,
    w: &Tensor,
    x_a: &Tensor,
    x_b: &Tensor,
    loss: ConfinementLoss,
) -> Result<f64> {
    let (d, d_in) = v.rows_cols("gradient_confinement_check")?;
    let (k, d2) = w.rows_cols("gradient_confinement_check")?;
    if d2 != d {
        return Err(Error::ShapeMismatch {
            op: "gradient_confinement_check",
            lhs: v.shape(),
            rhs: w.shape(),
        });
    }
    if k >= d {
        return Err(Error::config(format!(
            "confinement check needs K < D, got K={k}, D={d}"
        )));
    }

    v.zero_grad();
    let loss_value = confinement_forward(v, w, x_a, x_b, loss)?;
    loss_value.backward()?;
    let g = v
        .grad()
        .ok_or_else(|| Error::MissingGrad("backbone matrix".into()))?;

    // columns of W^T, i.e. rows of W, as vectors in R^D
    let w_vals = w.values();
    let mut wt = vec![0.0; d * k];
    for r in 0..k {
        for cidx in 0..d {
            wt[cidx * k + r] = w_vals[r * d + cidx];
        }
    }
    let basis = orthonormal_columns(&wt, d, k);
    let (residual, total) = complement_residual(&g, d, d_in, &basis);
    Ok(residual / total.max(1e-30))
}

/// Train only `V` for `steps` plain-SGD updates against fresh random
/// batches and return the Frobenius norm of the component of
/// `V_end - V_init` outside `span(W^T)`.
pub fn confinement_update_drift(
    v: &Tensor,
    w: &Tensor,
    d_in: usize,
    batch_size: usize,
    loss: ConfinementLoss,
    steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let (d, d_in2) = v.rows_cols("confinement_update_drift")?;
    let (k, _) = w.rows_cols("confinement_update_drift")?;
    if d_in2 != d_in {
        return Err(Error::ShapeMismatch {
            op: "confinement_update_drift",
            lhs: v.shape(),
            rhs: vec![d, d_in],
        });
    }
    let initial = v.values();
    for _ in 0..steps {
        let draw =
            |rng: &mut Rng| -> Vec<f64> { (0..batch_size * d_in).map(|_| rng.normal()).collect() };
        let x_a = Tensor::matrix(batch_size, d_in, draw(rng))?;
        let x_b = Tensor::matrix(batch_size, d_in, draw(rng))?;
        v.zero_grad();
        confinement_forward(v, w, &x_a, &x_b, loss)?.backward()?;
        let g = v
            .grad()
            .ok_or_else(|| Error::MissingGrad("backbone matrix".into()))?;
        let mut vals = v.values();
        for (val, gi) in vals.iter_mut().zip(&g) {
            *val -= lr * gi;
        }
        v.set_values(&vals)?;
    }

    let w_vals = w.values();
    let mut wt = vec![0.0; d * k];
    for r in 0..k {
        for cidx in 0..d {
            wt[cidx * k + r] = w_vals[r * d + cidx];
        }
    }
    let basis = orthonormal_columns(&wt, d, k);
    let delta: Vec<f64> = v
        .values()
        .iter()
        .zip(&initial)
        .map(|(a, b)| a - b)
        .collect();
    let (residual, _) = complement_residual(&delta, d, d_in, &basis);
    Ok(residual)
}
