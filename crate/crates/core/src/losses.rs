//! Training criteria: NT-Xent (contrastive), VICReg, and cross-entropy.
//!
//! All three build ordinary autodiff graphs from the embedding tensors, so
//! gradients flow through whatever produced them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Contrastive loss hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SimclrParams {
    pub temperature: f64,
}

impl Default for SimclrParams {
    fn default() -> Self {
        SimclrParams { temperature: 0.15 }
    }
}

/// VICReg coefficients and stabilizers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct VicregParams {
    pub sim_coeff: f64,
    pub std_coeff: f64,
    pub cov_coeff: f64,
    pub std_epsilon: f64,
    pub std_target: f64,
}

impl Default for VicregParams {
    fn default() -> Self {
        VicregParams {
            sim_coeff: 25.0,
            std_coeff: 25.0,
            cov_coeff: 1.0,
            std_epsilon: 1e-4,
            std_target: 1.0,
        }
    }
}

/// Normalized-temperature cross-entropy over paired views.
///
/// Rows of `z_a` and `z_b` at the same index are views of the same source.
/// Embeddings are L2-normalized, similarities are inner products over the
/// `2n` stacked rows divided by the temperature, and each anchor's positive
/// is its partner view. Self-similarity is excluded from the denominator;
/// the result is the mean over all `2n` anchors.
pub fn ntxent_loss(z_a: &Tensor, z_b: &Tensor, params: &SimclrParams) -> Result<Tensor> {
    if params.temperature <= 0.0 {
        return Err(Error::config(format!(
            "NT-Xent temperature must be positive, got {}",
            params.temperature
        )));
    }
    let (n, d) = z_a.rows_cols("ntxent_loss")?;
    let (n2, d2) = z_b.rows_cols("ntxent_loss")?;
    if n != n2 || d != d2 {
        return Err(Error::ShapeMismatch {
            op: "ntxent_loss",
            lhs: z_a.shape(),
            rhs: z_b.shape(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }

    let stacked = z_a.concat_rows(z_b)?;
    let unit = stacked.l2_normalize_rows()?;
    let sims = unit
        .matmul(&unit.transpose()?)?
        .scale(1.0 / params.temperature)?;

    // partner(i) = i + n for the first half, i - n for the second
    let partners: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    let denom = sims.row_logsumexp(true)?;
    let pos = sims.gather_per_row(&partners)?;
    denom.sub(&pos)?.mean()
}

/// Variance-invariance-covariance regularization.
///
/// - invariance: mean squared difference between paired rows, averaged over
///   batch and dimensions
/// - variance: per branch, mean over dimensions of
///   `max(0, target - sqrt(Var_j + eps))` with unbiased `Var`
/// - covariance: per branch, sum of squared off-diagonal entries of the
///   `1/(n-1)`-normalized covariance, divided by the dimension count
pub fn vicreg_loss(z_a: &Tensor, z_b: &Tensor, params: &VicregParams) -> Result<Tensor> {
    if params.sim_coeff < 0.0 || params.std_coeff < 0.0 || params.cov_coeff < 0.0 {
        return Err(Error::config(
            "VICReg coefficients must be non-negative".to_string(),
        ));
    }
    let (n, d) = z_a.rows_cols("vicreg_loss")?;
    let (n2, d2) = z_b.rows_cols("vicreg_loss")?;
    if n != n2 || d != d2 {
        return Err(Error::ShapeMismatch {
            op: "vicreg_loss",
            lhs: z_a.shape(),
            rhs: z_b.shape(),
        });
    }
    if n < 2 {
        return Err(Error::BatchTooSmall { n, min: 2 });
    }

    let diff = z_a.sub(z_b)?;
    let invariance = diff.mul(&diff)?.mean()?;

    let target = Tensor::full(vec![d], params.std_target);
    let offdiag_mask = {
        let mut m = vec![1.0; d * d];
        for j in 0..d {
            m[j * d + j] = 0.0;
        }
        Tensor::matrix(d, d, m)?
    };

    let branch = |z: &Tensor| -> Result<(Tensor, Tensor)> {
        let centered = z.sub_row(&z.col_mean()?)?;
        let var = centered
            .mul(&centered)?
            .col_sum()?
            .scale(1.0 / (n as f64 - 1.0))?;
        let std = var.add_scalar(params.std_epsilon)?.sqrt()?;
        let hinge = target.sub(&std)?.relu()?;
        let variance = hinge.mean()?;

        let cov = centered
            .transpose()?
            .matmul(&centered)?
            .scale(1.0 / (n as f64 - 1.0))?;
        let off = cov.mul(&offdiag_mask)?;
        let covariance = off.mul(&off)?.sum()?.scale(1.0 / d as f64)?;
        Ok((variance, covariance))
    };

    let (var_a, cov_a) = branch(z_a)?;
    let (var_b, cov_b) = branch(z_b)?;

    let total = invariance
        .scale(params.sim_coeff)?
        .add(&var_a.add(&var_b)?.scale(params.std_coeff)?)?
        .add(&cov_a.add(&cov_b)?.scale(params.cov_coeff)?)?;
    Ok(total)
}

/// Mean negative log-likelihood of the labeled class under softmax logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = logits.rows_cols("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    for &y in labels {
        if y >= c {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: c,
            });
        }
    }
    let lse = logits.row_logsumexp(false)?;
    let picked = logits.gather_per_row(labels)?;
    lse.sub(&picked)?.mean()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn ntxent_single_pair_is_zero() {
        // With n=1 the only non-self candidate is the positive.
        let z_a = t(1, 3, vec![0.3, -1.0, 2.0]);
        let z_b = t(1, 3, vec![5.0, 0.1, -0.7]);
        let loss = ntxent_loss(&z_a, &z_b, &SimclrParams::default()).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn ntxent_orthonormal_pairs_log3() {
        // 4 pairwise-orthonormal embeddings, tau = 1: every anchor sees
        // sim 0 everywhere, so the loss is -log(1/3) = log 3.
        let z_a = t(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let z_b = t(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let params = SimclrParams { temperature: 1.0 };
        let loss = ntxent_loss(&z_a, &z_b, &params).unwrap().item().unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn ntxent_scale_invariant() {
        let z_a = t(3, 4, vec![0.3, 1.2, -0.5, 0.8, 2.0, -1.0, 0.4, 0.9, -0.2, 0.6, 1.5, -1.1]);
        let z_b = t(3, 4, vec![1.1, -0.3, 0.7, 0.2, -0.9, 0.5, 1.3, -0.6, 0.8, -1.2, 0.1, 0.4]);
        let p = SimclrParams::default();
        let base = ntxent_loss(&z_a, &z_b, &p).unwrap().item().unwrap();
        let scaled = ntxent_loss(
            &z_a.scale(10.0).unwrap(),
            &z_b.scale(10.0).unwrap(),
            &p,
        )
        .unwrap()
        .item()
        .unwrap();
        assert!((base - scaled).abs() < 1e-10, "{base} vs {scaled}");
    }

    #[test]
    fn ntxent_empty_batch_rejected() {
        let z = Tensor::matrix(0, 4, vec![]).unwrap();
        assert!(matches!(
            ntxent_loss(&z, &z, &SimclrParams::default()),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn vicreg_opposed_scalar_pair_is_zero() {
        // n=2, d=1, zA=zB=[[1],[-1]]: inv 0, std above target, no covariance.
        let z = t(2, 1, vec![1.0, -1.0]);
        let loss = vicreg_loss(&z, &z, &VicregParams::default()).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn vicreg_all_zeros_matches_closed_form() {
        // Only the variance hinge fires: 25 * 2 * (1 - sqrt(1e-4)) = 49.5.
        let z = t(3, 4, vec![0.0; 12]);
        let loss = vicreg_loss(&z, &z, &VicregParams::default())
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - 49.5).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn vicreg_batch_of_one_rejected() {
        let z = t(1, 4, vec![1.0; 4]);
        assert!(matches!(
            vicreg_loss(&z, &z, &VicregParams::default()),
            Err(Error::BatchTooSmall { n: 1, min: 2 })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = t(2, 4, vec![0.7; 8]);
        let loss = cross_entropy(&logits, &[0, 3]).unwrap().item().unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_logit() {
        let logits = t(1, 3, vec![0.0, 1000.0, 0.0]);
        let loss = cross_entropy(&logits, &[1]).unwrap().item().unwrap();
        assert!(loss.abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = t(1, 3, vec![0.0, 0.0, 0.0]);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn losses_finite_for_huge_embeddings() {
        let z_a = t(3, 4, vec![1e6, -2e6, 5e5, 1e6, -1e6, 3e5, 2e6, -5e5, 1e6, 1e6, -1e6, 2e6]);
        let z_b = z_a.scale(0.5).unwrap();
        let nt = ntxent_loss(&z_a, &z_b, &SimclrParams::default())
            .unwrap()
            .item()
            .unwrap();
        let vi = vicreg_loss(&z_a, &z_b, &VicregParams::default())
            .unwrap()
            .item()
            .unwrap();
        let ce = cross_entropy(&z_a, &[0, 1, 2]).unwrap().item().unwrap();
        assert!(nt.is_finite() && vi.is_finite() && ce.is_finite());
    }
}
