//! Independent scalar-loop reference implementations of the training
//! losses, used by `verify` to cross-check the graph-based versions. These
//! are written as direct transcriptions of the loss definitions with plain
//! nested loops and share no code with the tensor engine.

/// NT-Xent over paired rows, computed with explicit loops and naive
/// exponentials (the embeddings are normalized, so no overflow discipline
/// is needed here).
pub fn ntxent_scalar(z_a: &[Vec<f64>], z_b: &[Vec<f64>], temperature: f64) -> f64 {
    let n = z_a.len();
    assert!(n >= 1);
    let normalize = |row: &Vec<f64>| -> Vec<f64> {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter().map(|v| v / norm).collect()
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * n);
    rows.extend(z_a.iter().map(&normalize));
    rows.extend(z_b.iter().map(&normalize));

    let m = 2 * n;
    let mut total = 0.0;
    for i in 0..m {
        let partner = (i + n) % m;
        let sim = |j: usize| -> f64 {
            rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / temperature
        };
        let mut denom = 0.0;
        for k in 0..m {
            if k != i {
                denom += sim(k).exp();
            }
        }
        total += -(sim(partner).exp() / denom).ln();
    }
    total / m as f64
}

/// VICReg with unbiased variance/covariance normalization, the per-dim
/// hinge on the standard deviation, and off-diagonal covariance penalty.
#[allow(clippy::too_many_arguments)]
pub fn vicreg_scalar(
    z_a: &[Vec<f64>],
    z_b: &[Vec<f64>],
    sim_coeff: f64,
    std_coeff: f64,
    cov_coeff: f64,
    std_epsilon: f64,
    std_target: f64,
) -> f64 {
    let n = z_a.len();
    assert!(n >= 2);
    let d = z_a[0].len();

    let mut invariance = 0.0;
    for i in 0..n {
        for j in 0..d {
            let diff = z_a[i][j] - z_b[i][j];
            invariance += diff * diff;
        }
    }
    invariance /= (n * d) as f64;

    let branch = |z: &[Vec<f64>]| -> (f64, f64) {
        let mut means = vec![0.0; d];
        for row in z {
            for j in 0..d {
                means[j] += row[j];
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut variance = 0.0;
        for j in 0..d {
            let mut var = 0.0;
            for row in z {
                let c = row[j] - means[j];
                var += c * c;
            }
            var /= n as f64 - 1.0;
            let hinge = std_target - (var + std_epsilon).sqrt();
            if hinge > 0.0 {
                variance += hinge;
            }
        }
        variance /= d as f64;

        let mut covariance = 0.0;
        for j in 0..d {
            for k in 0..d {
                if j == k {
                    continue;
                }
                let mut c = 0.0;
                for row in z {
                    c += (row[j] - means[j]) * (row[k] - means[k]);
                }
                c /= n as f64 - 1.0;
                covariance += c * c;
            }
        }
        covariance /= d as f64;
        (variance, covariance)
    };

    let (var_a, cov_a) = branch(z_a);
    let (var_b, cov_b) = branch(z_b);
    sim_coeff * invariance + std_coeff * (var_a + var_b) + cov_coeff * (cov_a + cov_b)
}

/// Mean negative log softmax probability of the labeled class.
pub fn cross_entropy_scalar(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = logits.len();
    assert_eq!(labels.len(), n);
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        total += -((row[y] - mx).exp() / denom).ln();
    }
    total / n as f64
}
