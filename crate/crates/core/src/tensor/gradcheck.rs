//! Finite-difference gradient verification.

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Compare autodiff gradients of `f` against central differences.
///
/// `f` must rebuild its graph from the current parameter values on every
/// call and return the scalar loss. For each parameter, up to
/// `coords_per_param` coordinates are checked (all of them when `None`);
/// the sampled subset is drawn deterministically from `rng`. The returned
/// value is the maximum over checked coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// A central difference resolves derivatives only down to a few ULPs of
/// `|f|` divided by `2*eps`; coordinates where both the analytic and the
/// numeric value sit below that resolution (e.g. bias directions that a
/// shift-invariant loss provably ignores) are reported as agreeing, since
/// at this scale the numeric side is pure evaluation roundoff. A genuine
/// defect on either side lifts one of the two values above the floor and
/// is still caught.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    coords_per_param: Option<usize>,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::config(format!("finite differences need eps > 0, got {eps}")));
    }

    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    let base = loss.item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss value {base}")));
    }
    loss.backward()?;

    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .ok_or_else(|| Error::MissingGrad("finite_difference_check parameter".into()))
        })
        .collect::<Result<_>>()?;

    let resolution = base.abs().max(1.0) * f64::EPSILON / (2.0 * eps) * 8.0;
    let mut max_rel = 0.0f64;
    for (p, grads) in params.iter().zip(&analytic) {
        let n = p.numel();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => rng.choose_distinct(n, k),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = {
                let mut vals = p.values();
                let v = vals[c];
                vals[c] = v + eps;
                p.set_values(&vals)?;
                v
            };
            let plus = f()?.item()?;
            {
                let mut vals = p.values();
                vals[c] = orig - eps;
                p.set_values(&vals)?;
            }
            let minus = f()?.item()?;
            {
                let mut vals = p.values();
                vals[c] = orig;
                p.set_values(&vals)?;
            }
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference evaluation at coordinate {c}: f(+)={plus}, f(-)={minus}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[c];
            if a.abs() <= resolution && numeric.abs() <= resolution {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
