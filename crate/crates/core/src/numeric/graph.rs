//! Tape-based reverse-mode differentiation over coarse tensor operations.
//!
//! A [`Graph`] records every operation of a forward pass as a node. Parameter
//! leaves borrow the parameter tensors instead of copying them; gradients for
//! those leaves come back from [`Graph::backward`] in parameter order.
//! Nodes are processed in reverse insertion order, so accumulation order is
//! fixed and results are bitwise reproducible.

use super::tensor::{gemm, log_sum_exp, softmax_in_place, MatMut, MatRef, Tensor};

pub type NodeId = usize;

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Param(usize),
    Input,
    Gather { table: NodeId, ids: Vec<usize> },
    Add(NodeId, NodeId),
    AddBias { x: NodeId, bias: NodeId },
    MatMul(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Gelu(NodeId),
    Dropout { x: NodeId, mask: Vec<f64> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, mean: Vec<f64>, rstd: Vec<f64> },
    Attention(Box<AttentionCache>),
    SelectRows { x: NodeId, rows: Vec<usize> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct AttentionCache {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    n_seq: usize,
    seq_len: usize,
    heads: usize,
    /// Row-major `[n_seq, heads, seq_len, seq_len]`.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node {id} has no value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        assert!(index < self.params.len(), "parameter index {index} out of range");
        self.nodes.push(Node { value: None, op: Op::Param(index), needs_grad: true });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value: Some(value), op: Op::Input, needs_grad: false });
        self.nodes.len() - 1
    }

    /// Embedding lookup: rows `ids` of a `[V, d]` table.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `x[n, c] + bias[c]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!(out.cols(), b.len());
        let c = b.len();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.push(out, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x W + b` for a row-batch `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| 0.5 * z * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2))).collect();
        let out = Tensor::from_vec(v.shape(), data);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Inverted dropout with a caller-supplied keep mask (entries 0 or 1/(1-rate)).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.len(), mask.len());
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_vec(v.shape(), data);
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let c = xv.cols();
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let rows = xv.rows();
        let mut out = Tensor::zeros(xv.shape());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * g.data()[j] + b.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push(out, Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds }, &[x, gain, bias])
    }

    /// Multi-head scaled dot-product attention over `n_seq` packed sequences.
    ///
    /// `q`, `k`, `v` are `[n_seq * seq_len, d]`; head `h` uses columns
    /// `h*dh .. (h+1)*dh`. Keys with `key_mask[i] == false` receive zero weight.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_seq: usize,
        seq_len: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(qv.rows(), n_seq * seq_len);
        assert_eq!(kv.shape(), qv.shape());
        assert_eq!(vv.shape(), qv.shape());
        assert_eq!(key_mask.len(), n_seq * seq_len);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = seq_len;
        let mut probs = vec![0.0; n_seq * heads * t * t];
        let mut out = Tensor::zeros(qv.shape());
        for b in 0..n_seq {
            let mask = &key_mask[b * t..(b + 1) * t];
            for h in 0..heads {
                let base = b * t * d + h * dh;
                let pofs = (b * heads + h) * t * t;
                let p = &mut probs[pofs..pofs + t * t];
                gemm(
                    t,
                    dh,
                    t,
                    scale,
                    MatRef::row_major(qv.data(), d).at(base),
                    MatRef::row_major(kv.data(), d).at(base).t(),
                    0.0,
                    MatMut::row_major(p, t),
                );
                for row in p.chunks_mut(t) {
                    masked_softmax(row, mask);
                }
                gemm(
                    t,
                    t,
                    dh,
                    1.0,
                    MatRef::row_major(p, t),
                    MatRef::row_major(vv.data(), d).at(base),
                    0.0,
                    MatMut::row_major(out.data_mut(), d).at(base),
                );
            }
        }
        let cache = AttentionCache { q, k, v, n_seq, seq_len, heads, probs };
        self.push(out, Op::Attention(Box::new(cache)), &[q, k, v])
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[rows.len(), xv.cols()]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x])
    }

    /// Mean negative log-likelihood (nats) of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len());
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            total += log_sum_exp(row) - row[y];
            softmax_in_place(probs.row_mut(r));
        }
        let out = Tensor::scalar(total / labels.len().max(1) as f64);
        self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    /// Reverse pass from a scalar node. Returns one gradient per parameter
    /// tensor (zeros for parameters the output does not depend on).
    pub fn backward(&self, output: NodeId, seed: f64) -> Vec<Tensor> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Tensor::full(self.value(output).shape(), seed));
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(i) => accumulate(&mut param_grads[*i], g),
                Op::Gather { table, ids } => {
                    if self.nodes[*table].needs_grad {
                        let mut gt = Tensor::zeros(self.value(*table).shape());
                        for (r, &tok) in ids.iter().enumerate() {
                            for (a, b) in gt.row_mut(tok).iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                        self.send(&mut grads, *table, gt);
                    }
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *b, g.clone());
                    self.send(&mut grads, *a, g);
                }
                Op::AddBias { x, bias } => {
                    if self.nodes[*bias].needs_grad {
                        let c = g.cols();
                        let mut gb = Tensor::zeros(&[c]);
                        for row in g.data().chunks(c) {
                            for (a, b) in gb.data_mut().iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        self.send(&mut grads, *bias, gb);
                    }
                    self.send(&mut grads, *x, g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if self.nodes[*b].needs_grad {
                        // dB = A^T dC
                        let mut gb = Tensor::zeros(vb.shape());
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            MatRef::row_major_t(va.data(), k),
                            MatRef::row_major(g.data(), n),
                            0.0,
                            MatMut::row_major(gb.data_mut(), n),
                        );
                        self.send(&mut grads, *b, gb);
                    }
                    if self.nodes[*a].needs_grad {
                        // dA = dC B^T
                        let mut ga = Tensor::zeros(va.shape());
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            MatRef::row_major(g.data(), n),
                            MatRef::row_major_t(vb.data(), n),
                            0.0,
                            MatMut::row_major(ga.data_mut(), k),
                        );
                        self.send(&mut grads, *a, ga);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.send(&mut grads, *b, Tensor::from_vec(vb.shape(), gb));
                    self.send(&mut grads, *a, Tensor::from_vec(va.shape(), ga));
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale(*s);
                    self.send(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.value(*a).shape(), g.data()[0]);
                    self.send(&mut grads, *a, ga);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&z, &gz)| {
                            let cdf = 0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2));
                            let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                            gz * (cdf + z * pdf)
                        })
                        .collect();
                    self.send(&mut grads, *x, Tensor::from_vec(xv.shape(), data));
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    self.send(&mut grads, *x, Tensor::from_vec(g.shape(), data));
                }
                Op::LayerNorm { x, gain, bias, mean, rstd } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let c = xv.cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    let mut gg = Tensor::zeros(&[c]);
                    let mut gbias = Tensor::zeros(&[c]);
                    let mut xhat = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for r in 0..xv.rows() {
                        let (row, grow) = (xv.row(r), g.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            xhat[j] = (row[j] - mean[r]) * rstd[r];
                            dxhat[j] = grow[j] * gv.data()[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xhat[j];
                            gg.data_mut()[j] += grow[j] * xhat[j];
                            gbias.data_mut()[j] += grow[j];
                        }
                        let (md, mdx) = (sum_d / c as f64, sum_dx / c as f64);
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[j] - md - xhat[j] * mdx);
                        }
                    }
                    self.send(&mut grads, *bias, gbias);
                    self.send(&mut grads, *gain, gg);
                    self.send(&mut grads, *x, gx);
                }
                Op::Attention(cache) => self.attention_backward(&mut grads, cache, &g),
                Op::SelectRows { x, rows } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    self.send(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let scale = g.data()[0] / labels.len().max(1) as f64;
                    let mut gl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        gl.row_mut(r)[y] -= 1.0;
                    }
                    gl.scale(scale);
                    self.send(&mut grads, *logits, gl);
                }
            }
        }

        param_grads
            .into_iter()
            .zip(self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: NodeId, g: Tensor) {
        if self.nodes[to].needs_grad {
            accumulate(&mut grads[to], g);
        }
    }

    fn attention_backward(&self, grads: &mut [Option<Tensor>], c: &AttentionCache, g: &Tensor) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.cols();
        let (t, heads) = (c.seq_len, c.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let mut dp = vec![0.0; t * t];
        for b in 0..c.n_seq {
            for h in 0..heads {
                let base = b * t * d + h * dh;
                let pofs = (b * heads + h) * t * t;
                let p = &c.probs[pofs..pofs + t * t];
                // dV = P^T dO
                gemm(
                    t,
                    t,
                    dh,
                    1.0,
                    MatRef::row_major_t(p, t),
                    MatRef::row_major(g.data(), d).at(base),
                    0.0,
                    MatMut::row_major(gv.data_mut(), d).at(base),
                );
                // dP = dO V^T
                gemm(
                    t,
                    dh,
                    t,
                    1.0,
                    MatRef::row_major(g.data(), d).at(base),
                    MatRef::row_major(vv.data(), d).at(base).t(),
                    0.0,
                    MatMut::row_major(&mut dp, t),
                );
                // dS = scale * P ∘ (dP - rowsum(dP ∘ P))
                for (prow, drow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                    let dotp: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = scale * pv * (*dv - dotp);
                    }
                }
                // dQ = dS K, dK = dS^T Q
                gemm(
                    t,
                    t,
                    dh,
                    1.0,
                    MatRef::row_major(&dp, t),
                    MatRef::row_major(kv.data(), d).at(base),
                    0.0,
                    MatMut::row_major(gq.data_mut(), d).at(base),
                );
                gemm(
                    t,
                    t,
                    dh,
                    1.0,
                    MatRef::row_major_t(&dp, t),
                    MatRef::row_major(qv.data(), d).at(base),
                    0.0,
                    MatMut::row_major(gk.data_mut(), d).at(base),
                );
            }
        }
        self.send(grads, c.v, gv);
        self.send(grads, c.k, gk);
        self.send(grads, c.q, gq);
    }
}

fn masked_softmax(row: &mut [f64], mask: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (v, &keep) in row.iter().zip(mask) {
        if keep && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (v, &keep) in row.iter_mut().zip(mask) {
        *v = if keep { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
