//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Values are computed eagerly as ops are pushed; `backward` walks the tape
//! in reverse and accumulates gradients for every node. The op set is the
//! minimum needed for a small transformer encoder with MLM and
//! classification heads: matmul, bias-add, GELU, layer norm, row softmax,
//! fused softmax cross-entropy, column slice/concat, row gather, transpose,
//! and scalar scaling. Graph execution is single-threaded; produced tensors
//! are immutable.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Softmax { a: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    GatherRows { a: NodeId, rows: Vec<usize> },
    MeanRows { a: NodeId },
    Transpose { a: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients for every tape node, indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// Row-wise log-sum-exp with the max subtracted.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Trainable leaf; its gradient participates in optimizer updates.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }))
    }

    /// `[m x n] + [n]` row-broadcast; the only broadcasting on the tape.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let bias_data = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bias_data[j];
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|v| v * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale { a, c })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Gelu { a })
    }

    /// Normalizes each row of `x` and applies the learned `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Row-wise softmax with the row max subtracted.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let ad = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Softmax { a })
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as one fused node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2();
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![m],
                rhs: vec![targets.len()],
            });
        }
        if m == 0 {
            return Err(Error::Contract("cross-entropy over zero rows".into()));
        }
        for &t in &targets {
            if t >= n {
                return Err(Error::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: n,
                });
            }
        }
        let ld = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * n..(i + 1) * n];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / m as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets },
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let ad = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ad[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (m, _) = self.value(parts[0]).dims2();
        let total: usize = parts.iter().map(|&p| self.value(p).dims2().1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (pm, pn) = self.value(p).dims2();
                if pm != m {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: vec![m],
                        rhs: vec![pm],
                    });
                }
                data.extend_from_slice(&self.value(p).data()[i * pn..(i + 1) * pn]);
            }
        }
        Ok(self.push(
            Tensor::matrix(m, total, data)?,
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    /// Gather rows by index; duplicate indices are allowed (embedding lookup).
    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        for &r in &rows {
            if r >= m {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    bound: m,
                });
            }
        }
        let ad = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(&ad[r * n..(r + 1) * n]);
        }
        Ok(self.push(Tensor::matrix(rows.len(), n, data)?, Op::GatherRows { a, rows }))
    }

    /// Column-wise mean over rows: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let ad = self.value(a).data();
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += ad[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= m as f64;
        }
        self.push(Tensor::matrix(1, n, data).unwrap(), Op::MeanRows { a })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let ad = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ad[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, data).unwrap(), Op::Transpose { a })
    }

    /// Reverse pass from a scalar loss node. Every node's gradient buffer
    /// has the shape of its value; the traversal visits each node once.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = self.nodes.iter().map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let grad = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::MatMul { a, b } => {
                    let (m, k) = self.value(*a).dims2();
                    let (_, n) = self.value(*b).dims2();
                    let g = grad.data();
                    // dA = G . B^T
                    let bd = self.value(*b).data();
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    let da = matmul_raw(g, &bt, m, n, k);
                    // dB = A^T . G
                    let ad = self.value(*a).data();
                    let mut at = vec![0.0; k * m];
                    for ii in 0..m {
                        for p in 0..k {
                            at[p * m + ii] = ad[ii * k + p];
                        }
                    }
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, grad.data());
                    self.accumulate(&mut grads, *b, grad.data());
                }
                Op::AddBias { a, bias } => {
                    self.accumulate(&mut grads, *a, grad.data());
                    let (m, n) = self.value(*a).dims2();
                    let g = grad.data();
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    self.accumulate(&mut grads, *bias, &db);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = grad.data().iter().map(|g| g * c).collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (m, n) = self.value(*x).dims2();
                    let xd = self.value(*x).data();
                    let gd = self.value(*gamma).data();
                    let g = grad.data();
                    let mut dx = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        let row = &xd[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mean: f64 = row.iter().sum::<f64>() / n as f64;
                        let var: f64 =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0; n];
                        for j in 0..n {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dxhat[j] = grow[j] * gd[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let nf = n as f64;
                        for j in 0..n {
                            dx[i * n + j] = inv_std / nf
                                * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *gamma, &dgamma);
                    self.accumulate(&mut grads, *beta, &dbeta);
                }
                Op::Softmax { a } => {
                    let (m, n) = self.value(*a).dims2();
                    let s = self.nodes[i].value.data();
                    let g = grad.data();
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let srow = &s[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            da[r * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let (m, n) = self.value(*logits).dims2();
                    let ld = self.value(*logits).data();
                    let gscale = grad.item() / m as f64;
                    let mut dl = vec![0.0; m * n];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &ld[r * n..(r + 1) * n];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..n {
                            let p = exps[j] / sum;
                            let y = if j == t { 1.0 } else { 0.0 };
                            dl[r * n + j] = gscale * (p - y);
                        }
                    }
                    self.accumulate(&mut grads, *logits, &dl);
                }
                Op::SliceCols { a, start, len } => {
                    let (m, n) = self.value(*a).dims2();
                    let g = grad.data();
                    let mut da = vec![0.0; m * n];
                    for i2 in 0..m {
                        for j in 0..*len {
                            da[i2 * n + start + j] = g[i2 * len + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::ConcatCols { parts } => {
                    let g = grad.data();
                    let (m, total) = self.nodes[i].value.dims2();
                    let mut offset = 0;
                    for &p in parts {
                        let (_, pn) = self.value(p).dims2();
                        let mut dp = vec![0.0; m * pn];
                        for r in 0..m {
                            dp[r * pn..(r + 1) * pn]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + pn]);
                        }
                        self.accumulate(&mut grads, p, &dp);
                        offset += pn;
                    }
                }
                Op::GatherRows { a, rows } => {
                    let (m, n) = self.value(*a).dims2();
                    let g = grad.data();
                    let mut da = vec![0.0; m * n];
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for j in 0..n {
                            da[src_r * n + j] += g[out_r * n + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::MeanRows { a } => {
                    let (m, n) = self.value(*a).dims2();
                    let g = grad.data();
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] = g[j] / m as f64;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Transpose { a } => {
                    let (m, n) = self.value(*a).dims2();
                    let g = grad.data();
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] = g[j * m + r];
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) {
        let slot = &mut grads[id.0];
        match slot {
            Some(t) => {
                for (g, d) in t.data_mut().iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => {
                let shape = self.nodes[id.0].value.shape().to_vec();
                let mut t = Tensor::zeros(shape);
                t.data_mut().copy_from_slice(delta);
                *slot = Some(t);
            }
        }
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite differences on an arbitrary scalar-valued tape build.
    fn numeric_grad<F>(build: F, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
    where
        F: Fn(&mut Tape, &[Vec<f64>]) -> NodeId,
    {
        let mut out = Vec::new();
        for p in 0..inputs.len() {
            let mut g = vec![0.0; inputs[p].len()];
            for i in 0..inputs[p].len() {
                let mut plus = inputs.to_vec();
                plus[p][i] += h;
                let mut tp = Tape::new();
                let lp = build(&mut tp, &plus);
                let fplus = tp.value(lp).item();

                let mut minus = inputs.to_vec();
                minus[p][i] -= h;
                let mut tm = Tape::new();
                let lm = build(&mut tm, &minus);
                let fminus = tm.value(lm).item();

                g[i] = (fplus - fminus) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_row() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // independent triple-loop oracle
        let mut expected = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                expected[i * 2 + j] = s;
            }
        }

        let mut t = Tape::new();
        let na = t.constant(Tensor::matrix(3, 4, a).unwrap());
        let nb = t.constant(Tensor::matrix(4, 2, b).unwrap());
        let c = t.matmul(na, nb).unwrap();
        for (got, want) in t.value(c).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::matrix(3, 8, vec![0.25; 24]).unwrap());
        let loss = t.softmax_cross_entropy(logits, vec![0, 3, 7]).unwrap();
        assert!((t.value(loss).item() - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_tiny() {
        let mut t = Tape::new();
        let mut row = vec![0.0; 8];
        row[2] = 50.0;
        let logits = t.constant(Tensor::matrix(1, 8, row).unwrap());
        let loss = t.softmax_cross_entropy(logits, vec![2]).unwrap();
        assert!(t.value(loss).item() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = vec![1usize, 9, 0, 4];

        // scratch log-sum-exp computation
        let mut expected = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &logits[r * 10..(r + 1) * 10];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            expected += lse - row[tgt];
        }
        expected /= 4.0;

        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(4, 10, logits).unwrap());
        let loss = t.softmax_cross_entropy(l, targets).unwrap();
        assert!((t.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        assert!(t.softmax_cross_entropy(logits, vec![4]).is_err());
    }

    #[test]
    fn cross_entropy_nonnegative_and_softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut t = Tape::new();
            let a = t.constant(Tensor::matrix(3, 4, data).unwrap());
            let s = t.softmax(a);
            for r in 0..3 {
                let sum: f64 = t.value(s).data()[r * 4..(r + 1) * 4].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            let loss = t.softmax_cross_entropy(a, vec![0, 1, 2]).unwrap();
            assert!(t.value(loss).item() >= 0.0);
        }
    }

    #[test]
    fn backward_linear_form_grad_is_x() {
        // loss = sum(w . x) via matmul with fixed x: grad(w) = x
        let x = vec![2.0, -1.0, 0.5];
        let mut t = Tape::new();
        let w = t.leaf(Tensor::matrix(1, 3, vec![0.3, 0.7, -0.2]).unwrap());
        let xv = t.constant(Tensor::matrix(3, 1, x.clone()).unwrap());
        let loss = t.matmul(w, xv).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), x.as_slice());
    }

    #[test]
    fn backward_quadratic_grad_is_2w() {
        // loss = ||w||^2 = w . w^T
        let wdata = vec![1.5, -2.0, 0.25];
        let mut t = Tape::new();
        let w = t.leaf(Tensor::matrix(1, 3, wdata.clone()).unwrap());
        let wt = t.transpose(w);
        let loss = t.matmul(w, wt).unwrap();
        let grads = t.backward(loss).unwrap();
        for (g, w0) in grads.get(w).unwrap().data().iter().zip(&wdata) {
            assert!((g - 2.0 * w0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        // x:  [3x4], w: [4x4], gamma/beta: [4], head: [4x5]
        let inputs: Vec<Vec<f64>> = vec![
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            (0..4).map(|_| rng.gen_range(0.5..1.5)).collect(),
            (0..4).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            (0..20).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            (0..5).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        ];

        let build = |t: &mut Tape, p: &[Vec<f64>]| -> NodeId {
            let x = t.leaf(Tensor::matrix(3, 4, p[0].clone()).unwrap());
            let w = t.leaf(Tensor::matrix(4, 4, p[1].clone()).unwrap());
            let gamma = t.leaf(Tensor::matrix(1, 4, p[2].clone()).unwrap());
            let beta = t.leaf(Tensor::matrix(1, 4, p[3].clone()).unwrap());
            let head = t.leaf(Tensor::matrix(4, 5, p[4].clone()).unwrap());
            let hb = t.leaf(Tensor::matrix(1, 5, p[5].clone()).unwrap());

            let xw = t.matmul(x, w).unwrap();
            let act = t.gelu(xw);
            let res = t.add(act, x).unwrap();
            let ln = t.layer_norm(res, gamma, beta, 1e-5).unwrap();
            let attnish = {
                let lt = t.transpose(ln);
                let scores = t.matmul(ln, lt).unwrap();
                let scaled = t.scale(scores, 0.5);
                let probs = t.softmax(scaled);
                t.matmul(probs, ln).unwrap()
            };
            let picked = t.gather_rows(attnish, vec![0, 2, 2]).unwrap();
            let logits0 = t.matmul(picked, head).unwrap();
            let logits = t.add_bias(logits0, hb).unwrap();
            t.softmax_cross_entropy(logits, vec![1, 0, 4]).unwrap()
        };

        let mut t = Tape::new();
        let ids: Vec<NodeId> = {
            // rebuild to capture leaf ids in order
            let x = t.leaf(Tensor::matrix(3, 4, inputs[0].clone()).unwrap());
            let w = t.leaf(Tensor::matrix(4, 4, inputs[1].clone()).unwrap());
            let gamma = t.leaf(Tensor::matrix(1, 4, inputs[2].clone()).unwrap());
            let beta = t.leaf(Tensor::matrix(1, 4, inputs[3].clone()).unwrap());
            let head = t.leaf(Tensor::matrix(4, 5, inputs[4].clone()).unwrap());
            let hb = t.leaf(Tensor::matrix(1, 5, inputs[5].clone()).unwrap());
            let xw = t.matmul(x, w).unwrap();
            let act = t.gelu(xw);
            let res = t.add(act, x).unwrap();
            let ln = t.layer_norm(res, gamma, beta, 1e-5).unwrap();
            let lt = t.transpose(ln);
            let scores = t.matmul(ln, lt).unwrap();
            let scaled = t.scale(scores, 0.5);
            let probs = t.softmax(scaled);
            let attnish = t.matmul(probs, ln).unwrap();
            let picked = t.gather_rows(attnish, vec![0, 2, 2]).unwrap();
            let logits0 = t.matmul(picked, head).unwrap();
            let logits = t.add_bias(logits0, hb).unwrap();
            let loss = t.softmax_cross_entropy(logits, vec![1, 0, 4]).unwrap();
            let grads = t.backward(loss).unwrap();
            let numeric = numeric_grad(build, &inputs, 1e-5);
            for (pi, id) in [x, w, gamma, beta, head, hb].iter().enumerate() {
                let analytic = grads.get(*id).unwrap().data();
                for (j, (&a, &n)) in analytic.iter().zip(&numeric[pi]).enumerate() {
                    assert!(
                        rel_err(a, n) < 1e-4,
                        "param {pi} coord {j}: analytic {a} vs numeric {n}"
                    );
                }
            }
            vec![x]
        };
        let _ = ids;
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 4, (0..8).map(|v| v as f64).collect()).unwrap());
        let left = t.slice_cols(a, 0, 2).unwrap();
        let right = t.slice_cols(a, 2, 2).unwrap();
        let back = t.concat_cols(&[left, right]).unwrap();
        assert_eq!(t.value(back).data(), t.value(a).data());
    }
}
