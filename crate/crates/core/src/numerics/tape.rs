//! Reverse-mode differentiation over a linear tape.
//!
//! Operations are appended in evaluation order; `backward` walks the tape in
//! reverse and accumulates adjoints. The op set is exactly what the toy
//! transformers need, with attention and cross-entropy fused so their saved
//! softmax tables are reused by the adjoint.

use crate::error::{shape_mismatch, Error, Result};

use super::ops::{gelu, gelu_grad, gemm, gemm_view, layer_norm_row, sigmoid, softmax_into, View};
use super::tensor::{dot, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Attention { q: Var, k: Var, v: Var, n_seq: usize, n_heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum { a: Var },
    Combine { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations, replayed backwards by
/// [`GradTape::backward`]. One tape per thread.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradTape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when `v` did not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.to_vec()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{op}: expected a matrix, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_mismatch("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, ng))
    }

    /// `a · bᵀ` with `b` stored `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(shape_mismatch("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt { a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Adds a length-`n` vector to every row of an `r×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, n) = dims2(self.value(a), "add_row")?;
        if self.value(bias).len() != n {
            return Err(shape_mismatch("add_row", self.value(a).shape(), self.value(bias).shape()));
        }
        let mut out = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::from_parts(vec![r, n], out), Op::AddRow { a, bias }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_mismatch("mul", x.shape(), y.shape()));
        }
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Dimension("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Validation(format!("row id {bad} out of range for {v} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { a, start }, ng))
    }

    /// Row-wise LayerNorm with `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = dims2(self.value(x), "layer_norm")?;
        if d < 2 {
            return Err(Error::Dimension(format!("layer_norm needs d >= 2, got {d}")));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_mismatch("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let ones = vec![1.0; d];
        let zeros = vec![0.0; d];
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let (_, rs) = layer_norm_row(row, &ones, &zeros, &mut xhat[i * d..(i + 1) * d]);
            rstd[i] = rs;
            for j in 0..d {
                out[i * d + j] = xhat[i * d + j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::from_parts(vec![r, d], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| gelu(v)).collect());
        let ng = self.ng(x);
        self.push(out, Op::Gelu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect());
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid { x }, ng)
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(n_seq·T)×d` with sequences stacked along rows;
    /// head `h` owns columns `h·d/n_heads..(h+1)·d/n_heads`. Position `i`
    /// attends to positions `0..=i` of its own sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_seq: usize, n_heads: usize) -> Result<Var> {
        let (rows, d) = dims2(self.value(q), "causal_attention")?;
        for t in [k, v] {
            if self.value(t).shape() != self.value(q).shape() {
                return Err(shape_mismatch("causal_attention", self.value(q).shape(), self.value(t).shape()));
            }
        }
        if n_seq == 0 || rows % n_seq != 0 || n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Dimension(format!(
                "causal_attention: {rows} rows / {n_seq} sequences, d={d} / {n_heads} heads"
            )));
        }
        let t_len = rows / n_seq;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let tt = t_len * t_len;
        let mut probs = vec![0.0; n_seq * n_heads * tt];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; tt];
        for s in 0..n_seq {
            for h in 0..n_heads {
                let blk = View::rows(s * t_len * d + h * dh, d);
                let pbase = (s * n_heads + h) * tt;
                gemm_view(t_len, dh, t_len, qd, blk, kd, blk.t(), &mut scores, View::rows(0, t_len), false);
                let p = &mut probs[pbase..pbase + tt];
                for i in 0..t_len {
                    let row = &mut scores[i * t_len..i * t_len + i + 1];
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_into(row, &mut p[i * t_len..i * t_len + i + 1]);
                }
                // Masked entries of `p` are exact zeros, so the full product
                // equals the causal one.
                gemm_view(t_len, t_len, dh, p, View::rows(0, t_len), vd, blk, &mut out, blk, false);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::Attention {
                q,
                k,
                v,
                n_seq,
                n_heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean token cross-entropy of row-wise softmax(logits) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, vocab) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != r || r == 0 {
            return Err(Error::Contract(format!(
                "cross_entropy: {r} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Validation(format!("target {bad} out of range for vocabulary {vocab}")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; r * vocab];
        let mut total = 0.0;
        for i in 0..r {
            let row = &z[i * vocab..(i + 1) * vocab];
            total += softmax_into(row, &mut probs[i * vocab..(i + 1) * vocab]) - row[targets[i]];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![total / r as f64]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum { a }, ng)
    }

    /// `Σ cᵢ·sᵢ` over scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::Contract("combine with no terms".into()));
        }
        let mut s = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Contract("combine expects scalar terms".into()));
            }
            s += c * self.scalar(v);
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![s]),
            Op::Combine {
                terms: terms.to_vec(),
            },
            ng,
        ))
    }

    /// Replays the tape backwards from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn node_backward(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| gemm(m, n, k, g, false, bd, true, ga, true));
                acc(*b, &mut |gb| gemm(k, m, n, ad, true, g, false, gb, true));
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| gemm(m, n, k, g, false, bd, false, ga, true));
                acc(*b, &mut |gb| gemm(n, m, k, g, true, ad, false, gb, true));
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    acc(v, &mut |gv| gv.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow { a, bias } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = self.value(*bias).len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let c = self.value(*a).shape()[1];
                let len = node.value.shape()[1];
                acc(*a, &mut |ga| {
                    for (r, row) in g.chunks_exact(len).enumerate() {
                        for (j, y) in row.iter().enumerate() {
                            ga[r * c + start + j] += y;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gd = self.value(*gain).data();
                acc(*gain, &mut |gg| {
                    for (row, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, (row, xh)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = row[j] * gd[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        let rs = rstd[r];
                        for j in 0..d {
                            gx[r * d + j] += rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_grad(xd[i]);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                n_seq,
                n_heads,
                probs,
            } => {
                let (rows, d) = (node.value.shape()[0], node.value.shape()[1]);
                let (n_seq, n_heads) = (*n_seq, *n_heads);
                let t_len = rows / n_seq;
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                let tt = t_len * t_len;
                let sq = View::rows(0, t_len);
                let mut dp = vec![0.0; tt];
                for s in 0..n_seq {
                    for h in 0..n_heads {
                        let blk = View::rows(s * t_len * d + h * dh, d);
                        let p = &probs[(s * n_heads + h) * tt..(s * n_heads + h + 1) * tt];
                        // dV = Pᵀ dO, dP = dO Vᵀ
                        gemm_view(t_len, t_len, dh, p, sq.t(), g, blk, &mut gv, blk, false);
                        gemm_view(t_len, dh, t_len, g, blk, vd, blk.t(), &mut dp, sq, false);
                        for i in 0..t_len {
                            let pr = &p[i * t_len..i * t_len + i + 1];
                            let dr = &mut dp[i * t_len..(i + 1) * t_len];
                            let pdp = dot(pr, &dr[..=i]);
                            for j in 0..=i {
                                dr[j] = pr[j] * (dr[j] - pdp) * scale;
                            }
                            dr[i + 1..].fill(0.0);
                        }
                        // dQ = dS K, dK = dSᵀ Q
                        gemm_view(t_len, t_len, dh, &dp, sq, kd, blk, &mut gq, blk, false);
                        gemm_view(t_len, t_len, dh, &dp, sq.t(), qd, blk, &mut gk, blk, false);
                    }
                }
                for (var, buf) in [(*q, &gq), (*k, &gk), (*v, &gv)] {
                    acc(var, &mut |gx| gx.iter_mut().zip(buf.iter()).for_each(|(x, y)| *x += y));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.value(*logits).shape()[1];
                let c = g[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            row[j] += c * p[j];
                        }
                        row[t] -= c;
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Combine { terms } => {
                for &(v, c) in terms {
                    acc(v, &mut |gv| gv[0] += c * g[0]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every input of `build` against central differences.
    fn check_graph(
        inputs: Vec<Tensor>,
        build: impl Fn(&mut GradTape, &[Var]) -> Var,
    ) -> f64 {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eval = |xs: &[Tensor]| {
            let mut t = GradTape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
            let l = build(&mut t, &vs);
            t.scalar(l)
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (ix, input) in inputs.iter().enumerate() {
            let analytic = grads.tensor(vars[ix]);
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[ix].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[ix].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::zeros(&[2, 3]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let (m, k, n) = (1 + trial % 3, 2 + trial % 4, 2 + (trial / 3) % 3);
            let inputs = vec![
                rand_tensor(&mut rng, &[m, k]),
                rand_tensor(&mut rng, &[k, n]),
                rand_tensor(&mut rng, &[n]),
                rand_tensor(&mut rng, &[n]),
                rand_tensor(&mut rng, &[5, n]),
            ];
            let targets: Vec<usize> = (0..m).map(|i| (i + trial) % 5).collect();
            let worst = check_graph(inputs, |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add_row(h, v[2]).unwrap();
                let ln = t.layer_norm(h, v[3], v[2]).unwrap();
                let a = t.gelu(ln);
                let s = t.sigmoid(h);
                let prod = t.mul(a, s).unwrap();
                let both = t.add(prod, ln).unwrap();
                let logits = t.matmul_nt(both, v[4]).unwrap();
                let ce = t.cross_entropy(logits, &targets).unwrap();
                let sl = t.slice_cols(both, 0, 1).unwrap();
                let sum = t.sum(sl);
                let sc = t.scale(sum, 0.3);
                t.combine(&[(ce, 1.0), (sc, 0.5)]).unwrap()
            });
            assert!(worst < 1e-4, "trial {trial}: relative error {worst}");
        }
    }

    #[test]
    fn attention_and_gather_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let (n_seq, t_len, heads, dh) = (1 + trial % 2, 3, 2, 2);
            let d = heads * dh;
            let rows = n_seq * t_len;
            let ids: Vec<usize> = (0..rows).map(|i| (i * 7 + trial) % 6).collect();
            let inputs = vec![
                rand_tensor(&mut rng, &[6, d]),
                rand_tensor(&mut rng, &[d, 3 * d]),
                rand_tensor(&mut rng, &[rows, d]),
            ];
            let worst = check_graph(inputs, |t, v| {
                let x = t.gather_rows(v[0], &ids).unwrap();
                let qkv = t.matmul(x, v[1]).unwrap();
                let q = t.slice_cols(qkv, 0, d).unwrap();
                let k = t.slice_cols(qkv, d, d).unwrap();
                let vv = t.slice_cols(qkv, 2 * d, d).unwrap();
                let att = t.causal_attention(q, k, vv, n_seq, heads).unwrap();
                let w = t.mul(att, v[2]).unwrap();
                t.sum(w)
            });
            assert!(worst < 1e-4, "trial {trial}: relative error {worst}");
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut tape = GradTape::new();
        let q = tape.constant(Tensor::matrix(1, 2, vec![0.3, -1.0]).unwrap());
        let k = tape.constant(Tensor::matrix(1, 2, vec![2.0, 0.5]).unwrap());
        let v = tape.constant(Tensor::matrix(1, 2, vec![7.0, -3.0]).unwrap());
        let out = tape.causal_attention(q, k, v, 1, 1).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, -3.0]);
    }
}
