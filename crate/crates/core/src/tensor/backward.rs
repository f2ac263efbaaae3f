//! Reverse-mode gradient propagation.
//!
//! `backward` walks the graph once to build a post-order (inputs before
//! consumers), then sweeps it in reverse, pushing vector-Jacobian products
//! into a per-pass gradient table. Whenever a node has `requires_grad`, the
//! pass-local gradient is also added into the node's persistent `grad`
//! buffer, so repeated calls accumulate.

use std::collections::HashSet;

use super::ops::{Op, L2_NORM_EPS};
use super::Tensor;
use crate::error::{Error, Result};

impl Tensor {
    /// Backpropagate from a scalar loss through every `requires_grad`
    /// ancestor.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.borrow();
            if inner.data.len() != 1 {
                return Err(Error::NotScalar {
                    shape: inner.shape.clone(),
                });
            }
        }
        if !self.requires_grad() {
            // Constant loss: nothing upstream wants a gradient.
            return Ok(());
        }

        let order = postorder(self);
        let mut table = GradTable::new();
        table.add(self.id(), &[1.0]);

        for node in order.iter().rev() {
            let Some(g) = table.take(node.id()) else {
                continue;
            };
            {
                let mut inner = node.borrow_mut();
                if inner.requires_grad {
                    match &mut inner.grad {
                        Some(buf) => {
                            for (b, gi) in buf.iter_mut().zip(&g) {
                                *b += gi;
                            }
                        }
                        None => inner.grad = Some(g.clone()),
                    }
                }
            }
            let inner = node.borrow();
            if let Some(op) = &inner.op {
                apply_vjp(op, &g, &inner.data, &mut table);
            }
        }
        Ok(())
    }
}

struct GradTable {
    grads: std::collections::HashMap<u64, Vec<f64>>,
}

impl GradTable {
    fn new() -> Self {
        GradTable {
            grads: std::collections::HashMap::new(),
        }
    }

    fn take(&mut self, id: u64) -> Option<Vec<f64>> {
        self.grads.remove(&id)
    }

    fn add(&mut self, id: u64, g: &[f64]) {
        match self.grads.get_mut(&id) {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => {
                self.grads.insert(id, g.to_vec());
            }
        }
    }

    fn accumulate(&mut self, t: &Tensor, g: Vec<f64>) {
        if t.requires_grad() {
            self.add(t.id(), &g);
        }
    }
}

/// Iterative DFS post-order over the requires-grad subgraph.
fn postorder(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, child cursor state) emulated with an explicit two-phase stack
    enum Frame {
        Enter(Tensor),
        Exit(Tensor),
    }
    let mut stack = vec![Frame::Enter(root.clone())];
    while let Some(frame) = stack.pop() {
        match frame {
            Frame::Enter(node) => {
                if !visited.insert(node.id()) {
                    continue;
                }
                stack.push(Frame::Exit(node.clone()));
                let inner = node.borrow();
                if let Some(op) = &inner.op {
                    for input in op_inputs(op) {
                        if input.requires_grad() && !visited.contains(&input.id()) {
                            stack.push(Frame::Enter(input));
                        }
                    }
                }
            }
            Frame::Exit(node) => order.push(node),
        }
    }
    order
}

fn op_inputs(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Matmul { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b }
        | Op::ConcatRows { a, b } => vec![a.clone(), b.clone()],
        Op::AddRow { x, row }
        | Op::SubRow { x, row }
        | Op::MulRow { x, row }
        | Op::DivRow { x, row } => vec![x.clone(), row.clone()],
        Op::Transpose { x }
        | Op::Relu { x }
        | Op::Sqrt { x }
        | Op::Scale { x, .. }
        | Op::AddScalar { x }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::ColMean { x }
        | Op::ColSum { x }
        | Op::L2NormalizeRows { x, .. }
        | Op::RowLogsumexp { x, .. }
        | Op::GatherPerRow { x, .. } => vec![x.clone()],
    }
}

/// Push the vector-Jacobian product of `g` (gradient w.r.t. the op output,
/// whose forward values are `out`) into each input's slot.
fn apply_vjp(op: &Op, g: &[f64], out: &[f64], table: &mut GradTable) {
    match op {
        Op::Matmul { a, b } => {
            let (n, p) = {
                let ia = a.borrow();
                (ia.shape[0], ia.shape[1])
            };
            let m = b.borrow().shape[1];
            if a.requires_grad() {
                // grad_a = g . b^T
                let bd = b.borrow();
                let mut ga = vec![0.0; n * p];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let brow = &bd.data[..];
                        for k in 0..p {
                            ga[i * p + k] += gij * brow[k * m + j];
                        }
                    }
                }
                drop(bd);
                table.accumulate(a, ga);
            }
            if b.requires_grad() {
                // grad_b = a^T . g
                let ad = a.borrow();
                let mut gb = vec![0.0; p * m];
                for i in 0..n {
                    for k in 0..p {
                        let aik = ad.data[i * p + k];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            gb[k * m + j] += aik * g[i * m + j];
                        }
                    }
                }
                drop(ad);
                table.accumulate(b, gb);
            }
        }
        Op::Transpose { x } => {
            let (n, m) = {
                let ix = x.borrow();
                (ix.shape[0], ix.shape[1])
            };
            // out is [m,n]; g follows out's layout
            let mut gx = vec![0.0; n * m];
            for j in 0..m {
                for i in 0..n {
                    gx[i * m + j] = g[j * n + i];
                }
            }
            table.accumulate(x, gx);
        }
        Op::Add { a, b } => {
            table.accumulate(a, g.to_vec());
            table.accumulate(b, g.to_vec());
        }
        Op::Sub { a, b } => {
            table.accumulate(a, g.to_vec());
            table.accumulate(b, g.iter().map(|v| -v).collect());
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let bd = b.borrow();
                table.accumulate(a, g.iter().zip(&bd.data).map(|(gi, bi)| gi * bi).collect());
            }
            if b.requires_grad() {
                let ad = a.borrow();
                table.accumulate(b, g.iter().zip(&ad.data).map(|(gi, ai)| gi * ai).collect());
            }
        }
        Op::AddRow { x, row } => {
            let d = row.numel();
            table.accumulate(x, g.to_vec());
            if row.requires_grad() {
                let mut gr = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % d] += gi;
                }
                table.accumulate(row, gr);
            }
        }
        Op::SubRow { x, row } => {
            let d = row.numel();
            table.accumulate(x, g.to_vec());
            if row.requires_grad() {
                let mut gr = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % d] -= gi;
                }
                table.accumulate(row, gr);
            }
        }
        Op::MulRow { x, row } => {
            let d = row.numel();
            if x.requires_grad() {
                let rd = row.borrow();
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * rd.data[i % d])
                    .collect();
                drop(rd);
                table.accumulate(x, gx);
            }
            if row.requires_grad() {
                let xd = x.borrow();
                let mut gr = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % d] += gi * xd.data[i];
                }
                drop(xd);
                table.accumulate(row, gr);
            }
        }
        Op::DivRow { x, row } => {
            let d = row.numel();
            let rd = row.borrow().data.clone();
            if x.requires_grad() {
                let gx = g.iter().enumerate().map(|(i, gi)| gi / rd[i % d]).collect();
                table.accumulate(x, gx);
            }
            if row.requires_grad() {
                // out = x / r  =>  d out / d r = -x / r^2 = -out / r
                let mut gr = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % d] -= gi * out[i] / rd[i % d];
                }
                table.accumulate(row, gr);
            }
        }
        Op::Relu { x } => {
            let xd = x.borrow();
            let gx = g
                .iter()
                .zip(&xd.data)
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect();
            drop(xd);
            table.accumulate(x, gx);
        }
        Op::Sqrt { x } => {
            let gx = g
                .iter()
                .zip(out)
                .map(|(gi, &oi)| gi * 0.5 / oi)
                .collect();
            table.accumulate(x, gx);
        }
        Op::Scale { x, c } => {
            table.accumulate(x, g.iter().map(|gi| gi * c).collect());
        }
        Op::AddScalar { x } => {
            table.accumulate(x, g.to_vec());
        }
        Op::Sum { x } => {
            table.accumulate(x, vec![g[0]; x.numel()]);
        }
        Op::Mean { x } => {
            let n = x.numel() as f64;
            table.accumulate(x, vec![g[0] / n; x.numel()]);
        }
        Op::ColMean { x } => {
            let (n, d) = {
                let ix = x.borrow();
                (ix.shape[0], ix.shape[1])
            };
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    gx[i * d + j] = g[j] / n as f64;
                }
            }
            table.accumulate(x, gx);
        }
        Op::ColSum { x } => {
            let (n, d) = {
                let ix = x.borrow();
                (ix.shape[0], ix.shape[1])
            };
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                gx[i * d..(i + 1) * d].copy_from_slice(&g[..d]);
            }
            table.accumulate(x, gx);
        }
        Op::ConcatRows { a, b } => {
            let na = a.numel();
            table.accumulate(a, g[..na].to_vec());
            table.accumulate(b, g[na..].to_vec());
        }
        Op::L2NormalizeRows { x, norms } => {
            let (n, d) = {
                let ix = x.borrow();
                (ix.shape[0], ix.shape[1])
            };
            let xd = x.borrow();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                let t = norms[i];
                let grow = &g[i * d..(i + 1) * d];
                let xrow = &xd.data[i * d..(i + 1) * d];
                let raw_norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                if raw_norm > L2_NORM_EPS {
                    // d(x/||x||)/dx = I/t - x x^T / t^3
                    let dot: f64 = grow.iter().zip(xrow).map(|(gi, xi)| gi * xi).sum();
                    for j in 0..d {
                        gx[i * d + j] = grow[j] / t - xrow[j] * dot / (t * t * t);
                    }
                } else {
                    // clamped denominator is constant
                    for j in 0..d {
                        gx[i * d + j] = grow[j] / t;
                    }
                }
            }
            drop(xd);
            table.accumulate(x, gx);
        }
        Op::RowLogsumexp { x, exclude_diag } => {
            let (n, m) = {
                let ix = x.borrow();
                (ix.shape[0], ix.shape[1])
            };
            let xd = x.borrow();
            let mut gx = vec![0.0; n * m];
            for i in 0..n {
                for k in 0..m {
                    if *exclude_diag && k == i {
                        continue;
                    }
                    gx[i * m + k] = g[i] * (xd.data[i * m + k] - out[i]).exp();
                }
            }
            drop(xd);
            table.accumulate(x, gx);
        }
        Op::GatherPerRow { x, idx } => {
            let m = x.borrow().shape[1];
            let mut gx = vec![0.0; x.numel()];
            for (i, &k) in idx.iter().enumerate() {
                gx[i * m + k] += g[i];
            }
            table.accumulate(x, gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .with_grad();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_loss_populates_nothing() {
        let c = Tensor::scalar(3.0);
        c.backward().unwrap();
        assert!(c.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::zeros(vec![2]).with_grad();
        assert!(matches!(
            x.backward(),
            Err(crate::Error::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let x = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap().with_grad();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let g1 = x.grad().unwrap();
        loss.backward().unwrap();
        let g2 = x.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = eye.matmul(&m).unwrap();
        assert_eq!(out.values(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().values(), vec![0.0]);
    }

    #[test]
    fn relu_all_negative_zero_grad() {
        let x = Tensor::from_vec(vec![3], vec![-1.0, -0.5, -2.0])
            .unwrap()
            .with_grad();
        let out = x.relu().unwrap();
        assert_eq!(out.values(), vec![0.0, 0.0, 0.0]);
        out.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_trivial_values() {
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().unwrap().values(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four() {
        let x = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let out = x.l2_normalize_rows().unwrap();
        let v = out.values();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let x = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert_eq!(x.l2_normalize_rows().unwrap().values(), vec![0.0; 6]);
    }

    #[test]
    fn shared_node_grads_accumulate() {
        // loss = sum(x * x) through two paths referencing the same node
        let x = Tensor::from_vec(vec![2], vec![2.0, 5.0]).unwrap().with_grad();
        let y = x.mul(&x).unwrap();
        let loss = y.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 10.0]);
    }

    #[test]
    fn shape_mismatch_named_in_error() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }
}
