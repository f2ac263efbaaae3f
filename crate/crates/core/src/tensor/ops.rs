//! Forward operations. Each op validates shapes, computes its result, and
//! records an [`Op`] node capturing the inputs it needs for the backward pass.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) const L2_NORM_EPS: f64 = 1e-12;

/// Recorded producing operation of a non-leaf tensor.
pub(crate) enum Op {
    Matmul { a: Tensor, b: Tensor },
    Transpose { x: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    AddRow { x: Tensor, row: Tensor },
    SubRow { x: Tensor, row: Tensor },
    MulRow { x: Tensor, row: Tensor },
    DivRow { x: Tensor, row: Tensor },
    Relu { x: Tensor },
    Sqrt { x: Tensor },
    Scale { x: Tensor, c: f64 },
    AddScalar { x: Tensor },
    Sum { x: Tensor },
    Mean { x: Tensor },
    ColMean { x: Tensor },
    ColSum { x: Tensor },
    ConcatRows { a: Tensor, b: Tensor },
    L2NormalizeRows { x: Tensor, norms: Vec<f64> },
    RowLogsumexp { x: Tensor, exclude_diag: bool },
    GatherPerRow { x: Tensor, idx: Vec<usize> },
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa,
            rhs: sb,
        });
    }
    Ok(())
}

fn track(a: &Tensor, b: Option<&Tensor>) -> bool {
    a.requires_grad() || b.is_some_and(Tensor::requires_grad)
}

impl Tensor {
    /// Matrix product `[n,p] x [p,m] -> [n,m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, p) = self.rows_cols("matmul")?;
        let (p2, m) = other.rows_cols("matmul")?;
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let a = self.borrow();
        let b = other.borrow();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for k in 0..p {
                let aik = a.data[i * p + k];
                let brow = &b.data[k * m..(k + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += aik * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        let rg = track(self, Some(other));
        Ok(Tensor::make(
            vec![n, m],
            out,
            rg,
            rg.then(|| Op::Matmul {
                a: self.clone(),
                b: other.clone(),
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.rows_cols("transpose")?;
        let x = self.borrow();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = x.data[i * m + j];
            }
        }
        drop(x);
        let rg = track(self, None);
        Ok(Tensor::make(
            vec![m, n],
            out,
            rg,
            rg.then(|| Op::Transpose { x: self.clone() }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = {
            let a = self.borrow();
            let b = other.borrow();
            a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()
        };
        let rg = track(self, Some(other));
        Ok(Tensor::make(
            self.shape(),
            out,
            rg,
            rg.then(|| Op::Add {
                a: self.clone(),
                b: other.clone(),
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = {
            let a = self.borrow();
            let b = other.borrow();
            a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect()
        };
        let rg = track(self, Some(other));
        Ok(Tensor::make(
            self.shape(),
            out,
            rg,
            rg.then(|| Op::Sub {
                a: self.clone(),
                b: other.clone(),
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = {
            let a = self.borrow();
            let b = other.borrow();
            a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect()
        };
        let rg = track(self, Some(other));
        Ok(Tensor::make(
            self.shape(),
            out,
            rg,
            rg.then(|| Op::Mul {
                a: self.clone(),
                b: other.clone(),
            }),
        ))
    }

    fn rowwise(
        &self,
        row: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let (n, d) = self.rows_cols(op)?;
        if row.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: row.shape(),
            });
        }
        let x = self.borrow();
        let r = row.borrow();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = f(x.data[i * d + j], r.data[j]);
            }
        }
        drop(x);
        drop(r);
        let rg = track(self, Some(row));
        Ok(Tensor::make(
            vec![n, d],
            out,
            rg,
            rg.then(|| make(self.clone(), row.clone())),
        ))
    }

    /// `[n,d] + [d]`, broadcasting the row across the batch (bias add).
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.rowwise(row, "add_row", |x, r| x + r, |x, row| Op::AddRow { x, row })
    }

    pub fn sub_row(&self, row: &Tensor) -> Result<Tensor> {
        self.rowwise(row, "sub_row", |x, r| x - r, |x, row| Op::SubRow { x, row })
    }

    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        self.rowwise(row, "mul_row", |x, r| x * r, |x, row| Op::MulRow { x, row })
    }

    pub fn div_row(&self, row: &Tensor) -> Result<Tensor> {
        self.rowwise(row, "div_row", |x, r| x / r, |x, row| Op::DivRow { x, row })
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Result<Tensor> {
        let out = self.borrow().data.iter().map(|&v| v.max(0.0)).collect();
        let rg = track(self, None);
        Ok(Tensor::make(
            self.shape(),
            out,
            rg,
            rg.then(|| Op::Relu { x: self.clone() }),
        ))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let out = self.borrow().data.iter().map(|&v| v.sqrt()).collect();
        let rg = track(self, None);
        Ok(Tensor::make(
            self.shape(),
            out,
            rg,
            rg.then(|| Op::Sqrt { x: self.clone() }),
        ))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out = self.borrow().data.iter().map(|&v| v * c).collect();
        let rg = track(self, None);
        Ok(Tensor::make(
            self.shape(),
            out,
            rg,
            rg.then(|| Op::Scale { x: self.clone(), c }),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let out = self.borrow().data.iter().map(|&v| v + c).collect();
        let rg = track(self, None);
        Ok(Tensor::make(
            self.shape(),
            out,
            rg,
            rg.then(|| Op::AddScalar { x: self.clone() }),
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.borrow().data.iter().sum();
        let rg = track(self, None);
        Ok(Tensor::make(
            vec![],
            vec![s],
            rg,
            rg.then(|| Op::Sum { x: self.clone() }),
        ))
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Result<Tensor> {
        let inner = self.borrow();
        if inner.data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let s: f64 = inner.data.iter().sum::<f64>() / inner.data.len() as f64;
        drop(inner);
        let rg = track(self, None);
        Ok(Tensor::make(
            vec![],
            vec![s],
            rg,
            rg.then(|| Op::Mean { x: self.clone() }),
        ))
    }

    /// Per-column mean over rows: `[n,d] -> [d]`.
    pub fn col_mean(&self) -> Result<Tensor> {
        let (n, d) = self.rows_cols("col_mean")?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let x = self.borrow();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += x.data[i * d + j];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        drop(x);
        let rg = track(self, None);
        Ok(Tensor::make(
            vec![d],
            out,
            rg,
            rg.then(|| Op::ColMean { x: self.clone() }),
        ))
    }

    /// Per-column sum over rows: `[n,d] -> [d]`.
    pub fn col_sum(&self) -> Result<Tensor> {
        let (n, d) = self.rows_cols("col_sum")?;
        let x = self.borrow();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += x.data[i * d + j];
            }
        }
        drop(x);
        let rg = track(self, None);
        Ok(Tensor::make(
            vec![d],
            out,
            rg,
            rg.then(|| Op::ColSum { x: self.clone() }),
        ))
    }

    /// Stack two matrices with equal column counts: `[n1,d];[n2,d] -> [n1+n2,d]`.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (_, d) = self.rows_cols("concat_rows")?;
        let (_, d2) = other.rows_cols("concat_rows")?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = self.borrow().data.clone();
        out.extend_from_slice(&other.borrow().data);
        let n_total = out.len() / d;
        let rg = track(self, Some(other));
        Ok(Tensor::make(
            vec![n_total, d],
            out,
            rg,
            rg.then(|| Op::ConcatRows {
                a: self.clone(),
                b: other.clone(),
            }),
        ))
    }

    /// Row-wise L2 normalization: each row divided by `max(||row||, 1e-12)`.
    /// Rows with norm above the guard come out exactly unit-length; zero rows
    /// stay zero.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (n, d) = self.rows_cols("l2_normalize_rows")?;
        let x = self.borrow();
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &x.data[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(L2_NORM_EPS);
            norms[i] = denom;
            for j in 0..d {
                out[i * d + j] = row[j] / denom;
            }
        }
        drop(x);
        let rg = track(self, None);
        Ok(Tensor::make(
            vec![n, d],
            out,
            rg,
            rg.then(|| Op::L2NormalizeRows {
                x: self.clone(),
                norms,
            }),
        ))
    }

    /// Numerically stable per-row `log sum exp`. With `exclude_diag` the
    /// matrix must be square and entry `(i,i)` is left out of row `i`.
    pub fn row_logsumexp(&self, exclude_diag: bool) -> Result<Tensor> {
        let (n, m) = self.rows_cols("row_logsumexp")?;
        if exclude_diag && (n != m || n < 2) {
            return Err(Error::ShapeMismatch {
                op: "row_logsumexp(exclude_diag)",
                lhs: self.shape(),
                rhs: vec![n, n],
            });
        }
        if m == 0 {
            return Err(Error::EmptyBatch);
        }
        let x = self.borrow();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &x.data[i * m..(i + 1) * m];
            let mut mx = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if exclude_diag && k == i {
                    continue;
                }
                mx = mx.max(v);
            }
            let mut s = 0.0;
            for (k, &v) in row.iter().enumerate() {
                if exclude_diag && k == i {
                    continue;
                }
                s += (v - mx).exp();
            }
            out[i] = mx + s.ln();
        }
        drop(x);
        let rg = track(self, None);
        Ok(Tensor::make(
            vec![n],
            out,
            rg,
            rg.then(|| Op::RowLogsumexp {
                x: self.clone(),
                exclude_diag,
            }),
        ))
    }

    /// Pick one entry per row: `out[i] = x[i, idx[i]]`.
    pub fn gather_per_row(&self, idx: &[usize]) -> Result<Tensor> {
        let (n, m) = self.rows_cols("gather_per_row")?;
        if idx.len() != n {
            return Err(Error::ShapeMismatch {
                op: "gather_per_row",
                lhs: vec![n],
                rhs: vec![idx.len()],
            });
        }
        for (i, &k) in idx.iter().enumerate() {
            if k >= m {
                return Err(Error::Contract(format!(
                    "gather_per_row: index {k} out of range for {m} columns (row {i})"
                )));
            }
        }
        let x = self.borrow();
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &k)| x.data[i * m + k])
            .collect();
        drop(x);
        let rg = track(self, None);
        Ok(Tensor::make(
            vec![n],
            out,
            rg,
            rg.then(|| Op::GatherPerRow {
                x: self.clone(),
                idx: idx.to_vec(),
            }),
        ))
    }
}

