//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Tape`] records every forward op. [`Tape::backward`] consumes the tape,
//! walks it in reverse and returns the gradients of every leaf that was
//! registered with `requires_grad`. Nodes that cannot reach such a leaf are
//! skipped entirely, so frozen sub-networks cost no backward work.
//!
//! Ops treat tensors as a stack of rows over the trailing dimension; leading
//! dimensions are only carried along for shape bookkeeping.

use crate::error::{EvoError, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ScaleRows { a: Var, s: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var },
    SwiGlu { x: Var },
    Sum { a: Var },
    Mean { a: Var },
    MeanRows { a: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    GatherFlat { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols { a: Var, b: Var },
    Reshape { a: Var },
    RowVecMat { x: Var, w: Var },
    CausalAttention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<i64>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax of one row.
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers `t` as a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    fn cols(&self, v: Var) -> usize {
        cols_of(&self.nodes[v.0].shape)
    }

    fn rows(&self, v: Var) -> usize {
        let c = self.cols(v);
        if c == 0 {
            0
        } else {
            self.nodes[v.0].data.len() / c
        }
    }

    fn with_last(&self, v: Var, last: usize) -> Vec<usize> {
        let mut s = self.nodes[v.0].shape.clone();
        match s.last_mut() {
            Some(l) => *l = last,
            None => s.push(last),
        }
        s
    }

    /// `a[..×k] · b[k×n] → [..×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bs = self.shape(b).to_vec();
        let k = self.cols(a);
        if bs.len() != 2 || bs[0] != k || self.shape(a).is_empty() {
            return Err(EvoError::dim("matmul", self.shape(a), &bs));
        }
        let n = bs[1];
        let m = self.rows(a);
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let shape = self.with_last(a, n);
        Ok(self.push(shape, out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a[..×k] · b[n×k]ᵀ → [..×n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let bs = self.shape(b).to_vec();
        let k = self.cols(a);
        if bs.len() != 2 || bs[1] != k || self.shape(a).is_empty() {
            return Err(EvoError::dim("matmul_nt", self.shape(a), &bs));
        }
        let n = bs[0];
        let m = self.rows(a);
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let shape = self.with_last(a, n);
        Ok(self.push(shape, out, Op::MatMulNt { a, b }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(EvoError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a `[n]` vector to every trailing row of `a[..×n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.cols(a);
        if self.shape(bias) != [n] {
            return Err(EvoError::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let bd = &self.nodes[bias.0].data;
        let out = self.nodes[a.0]
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRow { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, c }, &[a])
    }

    /// Multiplies row `i` of `a[N×C]` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let n = self.rows(a);
        if self.nodes[s.0].data.len() != n {
            return Err(EvoError::dim("scale_rows", self.shape(a), self.shape(s)));
        }
        let c = self.cols(a);
        let sd = &self.nodes[s.0].data;
        let out = self.nodes[a.0]
            .data
            .chunks(c)
            .zip(sd)
            .flat_map(|(row, w)| row.iter().map(move |x| x * w))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::ScaleRows { a, s }, &[a, s]))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.cols(x);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(EvoError::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.rows(x);
        let xd = &self.nodes[x.0].data;
        let (gd, bd) = (&self.nodes[gain.0].data, &self.nodes[bias.0].data);
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Row-wise softmax over the trailing dimension (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.cols(x);
        let mut out = self.value(x).to_vec();
        if c > 0 {
            out.chunks_mut(c).for_each(softmax_row);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Softmax { x }, &[x])
    }

    /// Splits the trailing dimension into gate and value halves and returns
    /// `silu(gate) ⊙ value`.
    pub fn swiglu(&mut self, x: Var) -> Result<Var> {
        let c = self.cols(x);
        if c % 2 != 0 {
            return Err(EvoError::dim("swiglu", self.shape(x), &[c / 2 * 2]));
        }
        let h = c / 2;
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| (0..h).map(move |j| row[j] * sigmoid(row[j]) * row[h + j]))
            .collect();
        let shape = self.with_last(x, h);
        Ok(self.push(shape, out, Op::SwiGlu { x }, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![], vec![s], Op::Mean { a }, &[a])
    }

    /// Column means of `a[N×E] → [E]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, e) = (self.rows(a), self.cols(a));
        if n == 0 {
            return Err(EvoError::contract("mean_rows over zero rows"));
        }
        let mut out = vec![0.0; e];
        for row in self.value(a).chunks(e) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(vec![e], out, Op::MeanRows { a }, &[a]))
    }

    /// Selects rows of `a[N×C]` (rows may repeat) into `[idx.len()×C]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = (self.rows(a), self.cols(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(EvoError::contract(format!("gather_rows index {bad} >= {n}")));
        }
        let ad = &self.nodes[a.0].data;
        let out = idx.iter().flat_map(|&i| ad[i * c..(i + 1) * c].iter().copied()).collect();
        Ok(self.push(
            vec![idx.len(), c],
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Adds row `r` of `a[m×C]` into row `idx[r]` of a zero `[n×C]` output.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (m, c) = (self.rows(a), self.cols(a));
        if idx.len() != m {
            return Err(EvoError::dim("scatter_rows", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(EvoError::contract(format!("scatter_rows index {bad} >= {n}")));
        }
        let mut out = vec![0.0; n * c];
        let ad = &self.nodes[a.0].data;
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += ad[r * c + j];
            }
        }
        Ok(self.push(
            vec![n, c],
            out,
            Op::ScatterRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Picks flat elements of `a` into a tensor of `shape`.
    pub fn gather_flat(&mut self, a: Var, idx: &[usize], shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(EvoError::dim("gather_flat", &shape, &[idx.len()]));
        }
        let ad = &self.nodes[a.0].data;
        if let Some(&bad) = idx.iter().find(|&&i| i >= ad.len()) {
            return Err(EvoError::contract(format!("gather_flat index {bad} >= {}", ad.len())));
        }
        let out = idx.iter().map(|&i| ad[i]).collect();
        Ok(self.push(
            shape,
            out,
            Op::GatherFlat {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.cols(a);
        if start + len > c {
            return Err(EvoError::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let shape = self.with_last(a, len);
        Ok(self.push(shape, out, Op::SliceCols { a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, rb) = (self.rows(a), self.rows(b));
        let (ca, cb) = (self.cols(a), self.cols(b));
        if ra != rb {
            return Err(EvoError::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let shape = self.with_last(a, ca + cb);
        Ok(self.push(shape, out, Op::ConcatCols { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(EvoError::dim("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape { a }, &[a]))
    }

    /// Per-row vector–matrix product with a per-row matrix:
    /// `x[N×d_in]`, `w[N×(d_in·d_out)]` (each row a row-major `d_in×d_out`
    /// matrix) → `[N×d_out]`.
    pub fn row_vecmat(&mut self, x: Var, w: Var, d_out: usize) -> Result<Var> {
        let (n, d_in) = (self.rows(x), self.cols(x));
        if self.rows(w) != n || self.cols(w) != d_in * d_out {
            return Err(EvoError::dim("row_vecmat", self.shape(x), self.shape(w)));
        }
        let (xd, wd) = (&self.nodes[x.0].data, &self.nodes[w.0].data);
        let mut out = vec![0.0; n * d_out];
        for r in 0..n {
            let xr = &xd[r * d_in..(r + 1) * d_in];
            let wr = &wd[r * d_in * d_out..(r + 1) * d_in * d_out];
            let orow = &mut out[r * d_out..(r + 1) * d_out];
            for (p, xv) in xr.iter().enumerate() {
                for (o, wv) in orow.iter_mut().zip(&wr[p * d_out..(p + 1) * d_out]) {
                    *o += xv * wv;
                }
            }
        }
        Ok(self.push(vec![n, d_out], out, Op::RowVecMat { x, w }, &[x, w]))
    }

    /// Multi-head causal scaled-dot-product attention. `q`, `k`, `v` hold
    /// `batch·seq` rows of width `C`; head `h` owns columns `h·C/heads..`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let c = self.cols(q);
        if self.shape(q) != self.shape(k) || self.shape(q) != self.shape(v) {
            return Err(EvoError::dim("causal_attention", self.shape(q), self.shape(k)));
        }
        if self.rows(q) != batch * seq || heads == 0 || c % heads != 0 {
            return Err(EvoError::dim("causal_attention", self.shape(q), &[batch, seq, heads]));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (&self.nodes[q.0].data, &self.nodes[k.0].data, &self.nodes[v.0].data);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * c];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * d;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * c + off..(b * seq + i) * c + off + d];
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * c + off..(b * seq + j) * c + off + d];
                        prow[j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_row(&mut prow[..=i]);
                    let orow = &mut out[(b * seq + i) * c + off..(b * seq + i) * c + off + d];
                    for j in 0..=i {
                        let p = prow[j];
                        let vj = &vd[(b * seq + j) * c + off..(b * seq + j) * c + off + d];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let shape = self.shape(q).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean token cross-entropy of `logits[N×V]` against `targets[N]`;
    /// negative targets are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64]) -> Result<Var> {
        let (n, vsz) = (self.rows(logits), self.cols(logits));
        if targets.len() != n {
            return Err(EvoError::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let count = targets.iter().filter(|&&t| t >= 0).count();
        if count == 0 {
            return Err(EvoError::contract("cross-entropy over zero non-excluded positions"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vsz as i64) {
            return Err(EvoError::contract(format!("target {bad} outside vocabulary of {vsz}")));
        }
        let ld = &self.nodes[logits.0].data;
        let mut probs = ld.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * vsz..(r + 1) * vsz];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            softmax_row(&mut probs[r * vsz..(r + 1) * vsz]);
            if t >= 0 {
                total += lse - row[t as usize];
            }
        }
        let loss = total / count as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Runs reverse-mode accumulation from the scalar `loss`, consuming the
    /// tape. Gradients are returned for every node that needed one.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes } = self;
        if nodes[loss.0].data.len() != 1 {
            return Err(EvoError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Returns the gradient buffer of `v` when it participates in backward.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let k = cols_of(&nodes[a.0].shape);
            let n = cols_of(&node.shape);
            let m = nodes[a.0].data.len() / k.max(1);
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let x = ad[r * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += x * y;
                        }
                    }
                }
            }
        }
        Op::MatMulNt { a, b } => {
            let k = cols_of(&nodes[a.0].shape);
            let n = cols_of(&node.shape);
            let m = nodes[a.0].data.len() / k.max(1);
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..m {
                    for j in 0..n {
                        let gv = g[r * n + j];
                        for (o, y) in ga[r * k..(r + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                            *o += gv * y;
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for r in 0..m {
                    let arow = &ad[r * k..(r + 1) * k];
                    for j in 0..n {
                        let gv = g[r * n + j];
                        for (o, x) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *o += gv * x;
                        }
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
        }
        Op::AddRow { a, bias } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            let n = cols_of(&node.shape);
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
            }
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(bd) {
                    *o += x * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((o, x), y) in gb.iter_mut().zip(g).zip(ad) {
                    *o += x * y;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x * c);
            }
        }
        Op::ScaleRows { a, s } => {
            let c = cols_of(&node.shape);
            let (ad, sd) = (&nodes[a.0].data, &nodes[s.0].data);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, w) in sd.iter().enumerate() {
                    for j in 0..c {
                        ga[r * c + j] += g[r * c + j] * w;
                    }
                }
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                for (r, o) in gs.iter_mut().enumerate() {
                    *o += (0..c).map(|j| g[r * c + j] * ad[r * c + j]).sum::<f64>();
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let c = cols_of(&node.shape);
            let gd = &nodes[gain.0].data;
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, rs) in rstd.iter().enumerate() {
                    let gy = &g[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let dxh: Vec<f64> = gy.iter().zip(gd).map(|(a, b)| a * b).collect();
                    let m1 = dxh.iter().sum::<f64>() / c as f64;
                    let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[r * c + j] += rs * (dxh[j] - m1 - xh[j] * m2);
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (row, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += row[j] * xh[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::Softmax { x } => {
            let c = cols_of(&node.shape);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, (y, gy)) in node.data.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::SwiGlu { x } => {
            let h = cols_of(&node.shape);
            let c = 2 * h;
            let xd = &nodes[x.0].data;
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, row) in xd.chunks(c).enumerate() {
                    for j in 0..h {
                        let (gt, val) = (row[j], row[h + j]);
                        let s = sigmoid(gt);
                        let silu = gt * s;
                        let dsilu = s * (1.0 + gt * (1.0 - s));
                        let go = g[r * h + j];
                        gx[r * c + j] += go * val * dsilu;
                        gx[r * c + h + j] += go * silu;
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean { a } => {
            let n = nodes[a.0].data.len() as f64;
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|o| *o += g[0] / n);
            }
        }
        Op::MeanRows { a } => {
            let e = node.data.len();
            let n = (nodes[a.0].data.len() / e.max(1)) as f64;
            if let Some(ga) = slot(nodes, grads, *a) {
                for row in ga.chunks_mut(e) {
                    row.iter_mut().zip(g).for_each(|(o, v)| *o += v / n);
                }
            }
        }
        Op::GatherRows { a, idx } => {
            let c = cols_of(&node.shape);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::ScatterRows { a, idx } => {
            let c = cols_of(&node.shape);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[r * c + j] += g[dst * c + j];
                    }
                }
            }
        }
        Op::GatherFlat { a, idx } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    ga[src] += g[r];
                }
            }
        }
        Op::SliceCols { a, start } => {
            let len = cols_of(&node.shape);
            let c = cols_of(&nodes[a.0].shape);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, row) in g.chunks(len.max(1)).enumerate() {
                    for j in 0..len {
                        ga[r * c + start + j] += row[j];
                    }
                }
            }
        }
        Op::ConcatCols { a, b } => {
            let ca = cols_of(&nodes[a.0].shape);
            let cb = cols_of(&nodes[b.0].shape);
            let c = ca + cb;
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, row) in g.chunks(c).enumerate() {
                    ga[r * ca..(r + 1) * ca].iter_mut().zip(&row[..ca]).for_each(|(o, v)| *o += v);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (r, row) in g.chunks(c).enumerate() {
                    gb[r * cb..(r + 1) * cb].iter_mut().zip(&row[ca..]).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
        Op::RowVecMat { x, w } => {
            let d_in = cols_of(&nodes[x.0].shape);
            let d_out = cols_of(&node.shape);
            let (xd, wd) = (&nodes[x.0].data, &nodes[w.0].data);
            let n = node.data.len() / d_out.max(1);
            if let Some(gx) = slot(nodes, grads, *x) {
                for r in 0..n {
                    let grow = &g[r * d_out..(r + 1) * d_out];
                    let wr = &wd[r * d_in * d_out..(r + 1) * d_in * d_out];
                    for p in 0..d_in {
                        gx[r * d_in + p] += grow
                            .iter()
                            .zip(&wr[p * d_out..(p + 1) * d_out])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                for r in 0..n {
                    let grow = &g[r * d_out..(r + 1) * d_out];
                    for p in 0..d_in {
                        let xv = xd[r * d_in + p];
                        let base = r * d_in * d_out + p * d_out;
                        for (o, gv) in gw[base..base + d_out].iter_mut().zip(grow) {
                            *o += xv * gv;
                        }
                    }
                }
            }
        }
        Op::CausalAttention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        } => {
            let (batch, seq, heads) = (*batch, *seq, *heads);
            let c = cols_of(&node.shape);
            let d = c / heads;
            let scale = 1.0 / (d as f64).sqrt();
            let (qd, kd, vd) = (&nodes[q.0].data, &nodes[k.0].data, &nodes[v.0].data);
            let mut gq = vec![0.0; qd.len()];
            let mut gk = vec![0.0; kd.len()];
            let mut gv = vec![0.0; vd.len()];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * d;
                    for i in 0..seq {
                        let row_i = (b * seq + i) * c + off;
                        let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                        let go = &g[row_i..row_i + d];
                        for j in 0..=i {
                            let row_j = (b * seq + j) * c + off;
                            dp[j] = go.iter().zip(&vd[row_j..row_j + d]).map(|(a, b)| a * b).sum();
                            for (o, x) in gv[row_j..row_j + d].iter_mut().zip(go) {
                                *o += prow[j] * x;
                            }
                        }
                        let dot: f64 = (0..=i).map(|j| prow[j] * dp[j]).sum();
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let row_j = (b * seq + j) * c + off;
                            for t in 0..d {
                                gq[row_i + t] += ds * kd[row_j + t];
                                gk[row_j + t] += ds * qd[row_i + t];
                            }
                        }
                    }
                }
            }
            for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
                if let Some(dst) = slot(nodes, grads, *var) {
                    dst.iter_mut().zip(&buf).for_each(|(o, x)| *o += x);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let vsz = cols_of(&nodes[logits.0].shape);
            let w = g[0] / *count as f64;
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    if t < 0 {
                        continue;
                    }
                    for j in 0..vsz {
                        gl[r * vsz + j] += w * probs[r * vsz + j];
                    }
                    gl[r * vsz + t as usize] -= w;
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` did not need one or
    /// was unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.wrt(v) {
            t.accumulate_grad(g);
        }
    }
}
