use std::rc::Rc;

use super::kernels::{
    masked_softmax_row, matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, softplus,
};
use super::{NumericsError, Tensor};

const LAYER_NORM_EPS: f64 = 1e-9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, with whatever the backward pass needs cached.
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulConst(Var, Rc<[f64]>),
    Concat(Vec<Var>),
    MaskedSoftmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var },
    Tile(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    AdditiveScores { p: Var, q: Var, w: Var, tanh: Vec<f64> },
    BceWithLogits { logits: Var, targets: Rc<[f64]>, weights: Rc<[f64]> },
    SoftmaxXent { logits: Var, probs: Vec<f64>, targets: Vec<usize>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations. Operands are always recorded
/// before their results, so a single reverse sweep is a valid backward pass.
///
/// A tape built with [`Tape::inference`] still computes values but never
/// keeps backward state, which keeps evaluation cheap.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    nondiff_on_grad_path: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when `v` is not on any path to the loss.
    pub fn get_or_zero(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.lens[v.0]],
        }
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true, nondiff_on_grad_path: false }
    }

    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false, nondiff_on_grad_path: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when a non-differentiable primitive consumed a value that
    /// depends on a gradient-requiring leaf.
    pub fn has_nondifferentiable_path(&self) -> bool {
        self.nondiff_on_grad_path
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let needs_grad = self.recording;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        operands: &[Var],
    ) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let needs_grad = self.recording && operands.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- ops

    /// `a[..., k] @ b[k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.is_empty() || bsh.len() != 2 || *ash.last().unwrap() != bsh[0] {
            return Err(mismatch("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Batched `a[B, m, k] @ b[B, k, n]`, or `a @ b^T` with `b[B, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(mismatch("bmm", format!("{ash:?} x {bsh:?}")));
        }
        let (batch, m, k) = (ash[0], ash[1], ash[2]);
        let (kb, n) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if kb != k {
            return Err(mismatch("bmm", format!("{ash:?} x {bsh:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let asl = &ad[i * m * k..(i + 1) * m * k];
            let bsl = &bd[i * k * n..(i + 1) * k * n];
            let csl = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                matmul_nt_acc(asl, bsl, csl, m, k, n);
            } else {
                matmul_acc(asl, bsl, csl, m, k, n);
            }
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        self.push("bmm", t, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    /// Adds `bias[n]` to every row of `a[..., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).last_dim();
        if self.value(bias).len() != n {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let bd = self.value(bias).data();
        let out: Vec<f64> =
            self.value(a).data().iter().enumerate().map(|(i, x)| x + bd[i % n]).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("add_bias", t, Op::AddBias(a, bias), &[a, bias])
    }

    /// Elementwise product with a constant of the same length (dropout
    /// masks, validity masks).
    pub fn mul_const(&mut self, a: Var, c: Rc<[f64]>) -> Result<Var, NumericsError> {
        if c.len() != self.value(a).len() {
            return Err(mismatch("mul_const", format!("{:?} vs {}", self.shape(a), c.len())));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("mul_const", t, Op::MulConst(a, c), &[a])
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout<R: rand::Rng>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, NumericsError> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(a, mask.into())
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no operands".into()));
        }
        let lead = &self.shape(parts[0])[..self.shape(parts[0]).len() - 1];
        let lead = lead.to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != lead.len() + 1 || sh[..sh.len() - 1] != lead[..] {
                return Err(mismatch("concat", format!("{lead:?} vs {sh:?}")));
            }
            widths.push(*sh.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), parts)
    }

    /// Softmax along the last axis. Entries flagged in `ignored` receive
    /// exactly zero weight; a row with every entry ignored is an error.
    pub fn masked_softmax(&mut self, x: Var, ignored: &[bool]) -> Result<Var, NumericsError> {
        let v = self.value(x);
        if ignored.len() != v.len() {
            return Err(mismatch("masked_softmax", format!("{:?} vs mask {}", v.shape(), ignored.len())));
        }
        let k = v.last_dim();
        let mut out = vec![0.0; v.len()];
        for (r, row) in v.data().chunks(k).enumerate() {
            masked_softmax_row(row, &ignored[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k])
                .ok_or(NumericsError::Precondition("masked softmax row has no considered entry"))?;
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("masked_softmax", t, Op::MaskedSoftmax(x), &[x])
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(name, t, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    /// Feature-wise normalization over the last axis, then `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).last_dim();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(mismatch("layer_norm", format!("{:?} with params {n}", self.shape(x))));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / n;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Temporal convolution. `x[B, L, Cin]`, `w[K, Cin, Cout]`, `b[Cout]`,
    /// odd `K`, zero padding so the output keeps length `L`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || ws[0] % 2 == 0 {
            return Err(mismatch("conv1d", format!("{xs:?} * {ws:?}")));
        }
        let (bsz, len, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[2]);
        if self.value(b).len() != cout {
            return Err(mismatch("conv1d", format!("bias {:?} for {cout} filters", self.shape(b))));
        }
        let pad = k / 2;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bsz * len * cout];
        for bi in 0..bsz {
            for l in 0..len {
                let o = &mut out[(bi * len + l) * cout..(bi * len + l + 1) * cout];
                o.copy_from_slice(bd);
                for tap in 0..k {
                    let src = l as isize + tap as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xin = &xd[(bi * len + src as usize) * cin..(bi * len + src as usize + 1) * cin];
                    let wk = &wd[tap * cin * cout..(tap + 1) * cin * cout];
                    matmul_acc(xin, wk, o, 1, cin, cout);
                }
            }
        }
        let t = Tensor::new(vec![bsz, len, cout], out)?;
        self.push("conv1d", t, Op::Conv1d { x, w, b }, &[x, w, b])
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var, NumericsError> {
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(d.len() * times);
        for _ in 0..times {
            out.extend_from_slice(d);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        self.push("tile", Tensor::new(shape, out)?, Op::Tile(x), &[x])
    }

    /// Views `x` as `[R, D]` (D = last axis) and picks `rows`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let dim = v.last_dim();
        let nrows = v.len() / dim.max(1);
        let mut out = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            if r >= nrows {
                return Err(mismatch("gather_rows", format!("row {r} of {nrows}")));
            }
            out.extend_from_slice(&v.data()[r * dim..(r + 1) * dim]);
        }
        let t = Tensor::new(vec![rows.len(), dim], out)?;
        self.push("gather_rows", t, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Additive (MLP) attention scores:
    /// `s[b, i, j] = sum_h w[h] * tanh(p[b, i, h] + q[b, j, h])`.
    pub fn additive_scores(&mut self, p: Var, q: Var, w: Var) -> Result<Var, NumericsError> {
        let (ps, qs) = (self.shape(p).to_vec(), self.shape(q).to_vec());
        if ps.len() != 3 || qs.len() != 3 || ps[0] != qs[0] || ps[2] != qs[2] {
            return Err(mismatch("additive_scores", format!("{ps:?} vs {qs:?}")));
        }
        let (bsz, lq, h) = (ps[0], ps[1], ps[2]);
        let lk = qs[1];
        if self.value(w).len() != h {
            return Err(mismatch("additive_scores", format!("w {:?} for hidden {h}", self.shape(w))));
        }
        let (pd, qd, wd) = (self.value(p).data(), self.value(q).data(), self.value(w).data());
        let keep_cache = self.recording;
        let mut cache = if keep_cache { vec![0.0; bsz * lq * lk * h] } else { Vec::new() };
        let mut out = vec![0.0; bsz * lq * lk];
        for b in 0..bsz {
            for i in 0..lq {
                let prow = &pd[(b * lq + i) * h..(b * lq + i + 1) * h];
                for j in 0..lk {
                    let qrow = &qd[(b * lk + j) * h..(b * lk + j + 1) * h];
                    let base = ((b * lq + i) * lk + j) * h;
                    let mut s = 0.0;
                    for t in 0..h {
                        let th = (prow[t] + qrow[t]).tanh();
                        if keep_cache {
                            cache[base + t] = th;
                        }
                        s += wd[t] * th;
                    }
                    out[(b * lq + i) * lk + j] = s;
                }
            }
        }
        let t = Tensor::new(vec![bsz, lq, lk], out)?;
        self.push("additive_scores", t, Op::AdditiveScores { p, q, w, tanh: cache }, &[p, q, w])
    }

    /// `sum_i weights[i] * BCE(sigmoid(logits[i]), targets[i])`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: Rc<[f64]>,
        weights: Rc<[f64]>,
    ) -> Result<Var, NumericsError> {
        let z = self.value(logits);
        if targets.len() != z.len() || weights.len() != z.len() {
            return Err(mismatch("bce_with_logits", format!("{:?} vs {}", z.shape(), targets.len())));
        }
        let mut s = 0.0;
        for ((&zi, &ti), &wi) in z.data().iter().zip(targets.iter()).zip(weights.iter()) {
            if wi != 0.0 {
                s += wi * (softplus(zi) - ti * zi);
            }
        }
        let op = Op::BceWithLogits { logits, targets, weights };
        self.push("bce_with_logits", Tensor::scalar(s), op, &[logits])
    }

    /// Categorical cross-entropy of row-wise (masked) softmax over the last
    /// axis against target indices: `sum_r weights[r] * -log p[r, targets[r]]`.
    pub fn softmax_xent(
        &mut self,
        logits: Var,
        ignored: Option<&[bool]>,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, NumericsError> {
        let z = self.value(logits);
        let k = z.last_dim();
        let rows = z.len() / k;
        if targets.len() != rows || weights.len() != rows {
            return Err(mismatch("softmax_xent", format!("{:?} vs {} targets", z.shape(), targets.len())));
        }
        let all_on = vec![false; k];
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let ign = match ignored {
                Some(m) => &m[r * k..(r + 1) * k],
                None => &all_on[..],
            };
            let row = &z.data()[r * k..(r + 1) * k];
            masked_softmax_row(row, ign, &mut probs[r * k..(r + 1) * k])
                .ok_or(NumericsError::Precondition("cross-entropy row has no considered entry"))?;
            let t = targets[r];
            if weights[r] != 0.0 {
                if t >= k || ign[t] {
                    return Err(NumericsError::Precondition(
                        "cross-entropy target is masked or out of range",
                    ));
                }
                // log-sum-exp form avoids log(0) on very peaked rows
                let max = row.iter().zip(ign).filter(|(_, &m)| !m).map(|(v, _)| *v).fold(f64::MIN, f64::max);
                let lse: f64 = row
                    .iter()
                    .zip(ign)
                    .filter(|(_, &m)| !m)
                    .map(|(v, _)| (v - max).exp())
                    .sum::<f64>()
                    .ln()
                    + max;
                loss += weights[r] * (lse - row[t]);
            }
        }
        let op = Op::SoftmaxXent { logits, probs, targets: targets.to_vec(), weights: weights.to_vec() };
        self.push("softmax_xent", Tensor::scalar(loss), op, &[logits])
    }

    /// One-hot of the row-wise argmax (first maximum wins). Not
    /// differentiable: no gradient flows through it.
    pub fn argmax_one_hot(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let k = v.last_dim();
        let mut out = vec![0.0; v.len()];
        for (r, row) in v.data().chunks(k).enumerate() {
            let mut best = 0;
            for (j, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = j;
                }
            }
            out[r * k + best] = 1.0;
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        if self.needs(x) {
            self.nondiff_on_grad_path = true;
        }
        Ok(self.constant(t))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let bsh = self.shape(*b);
                let (k, n) = (bsh[0], bsh[1]);
                let m = g.len() / n;
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_nt_acc(g, val(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_tn_acc(val(*a), g, gb, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let ash = self.shape(*a);
                let (batch, m, k) = (ash[0], ash[1], ash[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bsl = &bd[i * k * n..(i + 1) * k * n];
                        let gas = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // C = A B^T, B is [n, k]: dA = dC B
                            matmul_acc(gi, bsl, gas, m, n, k);
                        } else {
                            // B is [k, n]: dA = dC B^T
                            matmul_nt_acc(gi, bsl, gas, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let asl = &ad[i * m * k..(i + 1) * m * k];
                        let gbs = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n, k] = dC^T A
                            matmul_tn_acc(gi, asl, gbs, m, n, k);
                        } else {
                            // dB[k, n] = A^T dC
                            matmul_tn_acc(asl, gi, gbs, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * c;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let n = gb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * c[i];
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = g.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let k = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..y.len() / k {
                        let (yr, gr) = (&y[r * k..(r + 1) * k], &g[r * k..(r + 1) * k]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            gx[r * k + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = val(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = node.value.last_dim();
                let gm = val(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for i in 0..g.len() {
                        gg[i % n] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for i in 0..g.len() {
                        gb[i % n] += g[i];
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let base = r * n;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = g[base + j] * gm[j];
                            sum_d += d;
                            sum_dx += d * xhat[base + j];
                        }
                        for j in 0..n {
                            let d = g[base + j] * gm[j];
                            gx[base + j] += is * (d - sum_d / nf - xhat[base + j] * sum_dx / nf);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let xs = self.shape(*x);
                let (bsz, len, cin) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (k, cout) = (ws[0], ws[2]);
                let pad = k / 2;
                let (xd, wd) = (val(*x), val(*w));
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % cout] += gi;
                    }
                }
                let mut gw_buf = self.needs(*w).then(|| vec![0.0; wd.len()]);
                let mut gx_buf = self.needs(*x).then(|| vec![0.0; xd.len()]);
                for bi in 0..bsz {
                    for l in 0..len {
                        let go = &g[(bi * len + l) * cout..(bi * len + l + 1) * cout];
                        for tap in 0..k {
                            let src = l as isize + tap as isize - pad as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let xoff = (bi * len + src as usize) * cin;
                            let woff = tap * cin * cout;
                            if let Some(gw) = gw_buf.as_mut() {
                                matmul_tn_acc(
                                    &xd[xoff..xoff + cin],
                                    go,
                                    &mut gw[woff..woff + cin * cout],
                                    1,
                                    cin,
                                    cout,
                                );
                            }
                            if let Some(gx) = gx_buf.as_mut() {
                                matmul_nt_acc(
                                    go,
                                    &wd[woff..woff + cin * cout],
                                    &mut gx[xoff..xoff + cin],
                                    1,
                                    cout,
                                    cin,
                                );
                            }
                        }
                    }
                }
                if let (Some(buf), Some(gw)) = (gw_buf, self.slot(grads, *w)) {
                    add_into(gw, &buf);
                }
                if let (Some(buf), Some(gx)) = (gx_buf, self.slot(grads, *x)) {
                    add_into(gx, &buf);
                }
            }
            Op::Tile(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.len();
                    for chunk in g.chunks(n) {
                        add_into(gx, chunk);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let dim = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * dim..(r + 1) * dim], &g[i * dim..(i + 1) * dim]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::AdditiveScores { p, q, w, tanh } => {
                let ps = self.shape(*p);
                let (bsz, lq, h) = (ps[0], ps[1], ps[2]);
                let lk = self.shape(*q)[1];
                let wd = val(*w);
                let mut gp = self.needs(*p).then(|| vec![0.0; bsz * lq * h]);
                let mut gq = self.needs(*q).then(|| vec![0.0; bsz * lk * h]);
                let mut gw = self.needs(*w).then(|| vec![0.0; h]);
                for b in 0..bsz {
                    for i in 0..lq {
                        for j in 0..lk {
                            let gs = g[(b * lq + i) * lk + j];
                            if gs == 0.0 {
                                continue;
                            }
                            let base = ((b * lq + i) * lk + j) * h;
                            for t in 0..h {
                                let th = tanh[base + t];
                                if let Some(gw) = gw.as_mut() {
                                    gw[t] += gs * th;
                                }
                                let d = gs * wd[t] * (1.0 - th * th);
                                if let Some(gp) = gp.as_mut() {
                                    gp[(b * lq + i) * h + t] += d;
                                }
                                if let Some(gq) = gq.as_mut() {
                                    gq[(b * lk + j) * h + t] += d;
                                }
                            }
                        }
                    }
                }
                for (v, buf) in [(*p, gp), (*q, gq), (*w, gw)] {
                    if let (Some(buf), Some(dst)) = (buf, self.slot(grads, v)) {
                        add_into(dst, &buf);
                    }
                }
            }
            Op::BceWithLogits { logits, targets, weights } => {
                let z = val(*logits);
                if let Some(gz) = self.slot(grads, *logits) {
                    for i in 0..z.len() {
                        gz[i] += g[0] * weights[i] * (sigmoid(z[i]) - targets[i]);
                    }
                }
            }
            Op::SoftmaxXent { logits, probs, targets, weights } => {
                let k = self.nodes[logits.0].value.last_dim();
                if let Some(gz) = self.slot(grads, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gz[r * k + j] += g[0] * w * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}
