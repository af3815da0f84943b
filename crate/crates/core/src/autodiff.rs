//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node indices are
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse. Nodes whose inputs never require a gradient are skipped entirely,
//! which is what makes frozen-encoder training cheap.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{axis_split, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Expand(Var),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Gather(Var, Vec<usize>),
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Mean(Var, usize),
    Sum(Var),
    Exp(Var),
    L2Normalize(Var, Vec<F>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    named: BTreeMap<String, Var>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            named: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An unnamed leaf that does receive a gradient.
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A named leaf. Re-registering a name returns the existing node.
    pub fn named_leaf(&mut self, name: &str, t: impl FnOnce() -> Tensor<F>, requires_grad: bool) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(t(), Op::Leaf, requires_grad);
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    // ---------------------------------------------------------------- ops

    fn broadcast_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(self.value(b).numel())
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s and is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let period = self.broadcast_suffix("add", a, b)?;
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(period) {
            for (o, &y) in chunk.iter_mut().zip(bd) {
                *o = *o + y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let period = self.broadcast_suffix("mul", a, b)?;
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(period) {
            for (o, &y) in chunk.iter_mut().zip(bd) {
                *o = *o * y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .map_err(|_| Error::shape("mul_scalar", self.shape(a), self.shape(s)))?;
        let out = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    /// Batched matrix product over the trailing two axes.
    ///
    /// `b` is either rank 2 (shared across the batch) or has exactly the same
    /// leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_ok = sb.len() == 2 || sa[..sa.len() - 2] == sb[..sb.len() - 2];
        if k != k2 || !batch_ok {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); ad.len() / k * n];
        if sb.len() == 2 {
            gemm_nn(ad.len() / k, k, n, ad, bd, &mut out);
        } else {
            for ((ab, bb), cb) in ad
                .chunks_exact(m * k)
                .zip(bd.chunks_exact(k * n))
                .zip(out.chunks_exact_mut(m * n))
            {
                gemm_nn(m, k, n, ab, bb, cb);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let mut seen = vec![false; src.rank()];
        for &p in perm {
            if p >= src.rank() || seen[p] {
                return Err(Error::shape("permute", src.shape(), perm));
            }
            seen[p] = true;
        }
        if perm.len() != src.rank() {
            return Err(Error::shape("permute", src.shape(), perm));
        }
        let out = permute_tensor(src, perm)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Repeats `a` along a new leading axis of length `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        let src = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(src.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Expand(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let (outer, n, inner) = src.axis_split(axis)?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice", src.shape(), &[axis, start, len]));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { src: a, axis, start }, rg))
    }

    /// Selects rows along axis 0 (embedding lookup).
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let rows = src.shape()[0];
        if indices.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let inner = src.numel() / rows;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("gather", src.shape(), &[i]));
            }
            data.extend_from_slice(&src.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.rg(a);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather(a, indices.to_vec()), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.value(a);
        let (outer, n, inner) = src.axis_split(axis)?;
        let x = src.data();
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / sum;
                }
            }
        }
        let rg = self.rg(a);
        let out = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    /// Softmax over the last axis where `mask[i] == false` forces weight zero.
    ///
    /// `mask` has exactly as many elements as `a`. A row with no admissible
    /// entry is an error.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<[bool]>) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.numel() {
            return Err(Error::shape("masked_softmax", src.shape(), &[mask.len()]));
        }
        let n = *src.shape().last().unwrap_or(&1);
        let mut out = vec![F::zero(); src.numel()];
        for (r, ((xr, mr), or)) in src
            .data()
            .chunks_exact(n)
            .zip(mask.chunks_exact(n))
            .zip(out.chunks_exact_mut(n))
            .enumerate()
        {
            let max = xr
                .iter()
                .zip(mr)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut sum = F::zero();
            for ((o, &x), &m) in or.iter_mut().zip(xr).zip(mr) {
                if m {
                    *o = (x - max).exp();
                    sum = sum + *o;
                }
            }
            for o in or.iter_mut() {
                *o = *o / sum;
            }
        }
        let rg = self.rg(a);
        let out = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(out, Op::MaskedSoftmax(a), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| F::of(gelu(x.as_f64())));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let src = self.value(x);
        let d = *src.shape().last().unwrap_or(&1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", src.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.numel() / d;
        let mut xhat = Vec::with_capacity(src.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(d) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(F::of(r));
            for (j, v) in row.iter().enumerate() {
                let h = F::of((v.as_f64() - mean) * r);
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean along `axis`, which is removed from the shape (rank-1 inputs give `[1]`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.value(a);
        let (outer, n, inner) = src.axis_split(axis)?;
        let x = src.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| x[o * n * inner + j * inner + i].as_f64()).sum();
                out.push(F::of(s / n as f64));
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Mean(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(F::of(s)), Op::Sum(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Scales every vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let d = *src.shape().last().unwrap_or(&1);
        let mut norms = Vec::with_capacity(src.numel() / d);
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(d) {
            let n = row
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            norms.push(F::of(n));
            out.extend(row.iter().map(|v| F::of(v.as_f64() / n)));
        }
        let shape = src.shape().to_vec();
        let rg = self.rg(a);
        let out = Tensor::new(shape, out).expect("shape unchanged");
        self.push(out, Op::L2Normalize(a, norms), rg)
    }

    /// Mean softmax cross-entropy over rows of `logits` (last axis = classes).
    ///
    /// Rows whose target is `None` are excluded from both the sum and the count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let src = self.value(logits);
        let v = *src.shape().last().unwrap_or(&1);
        let rows = src.numel() / v;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", src.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::invalid("cross-entropy with every position excluded"));
        }
        let mut probs = vec![F::zero(); src.numel()];
        let mut total = 0.0f64;
        for ((row, prow), t) in src
            .data()
            .chunks_exact(v)
            .zip(probs.chunks_exact_mut(v))
            .zip(targets)
        {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::invalid(format!("target {t} outside {v} classes")));
            }
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            for (p, x) in prow.iter_mut().zip(row) {
                *p = F::of((x.as_f64() - max).exp() / sum);
            }
            total += sum.ln() + max - row[t].as_f64();
        }
        let loss = Tensor::scalar(F::of(total / count as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one())?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(node.value.zeros_like());
            }
        }
        Ok(Gradients {
            grads,
            named: self.named.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(t),
        }
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let mut gb = vec![F::zero(); bv.numel()];
                    for chunk in gd.chunks_exact(bv.numel()) {
                        for (s, &x) in gb.iter_mut().zip(chunk) {
                            *s = *s + x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let period = bv.numel();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_exact_mut(period) {
                        for (x, &y) in chunk.iter_mut().zip(bv.data()) {
                            *x = *x * y;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![F::zero(); period];
                    for (gc, ac) in gd.chunks_exact(period).zip(av.data().chunks_exact(period)) {
                        for ((s, &x), &y) in gb.iter_mut().zip(gc).zip(ac) {
                            *s = *s + x * y;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * sv));
                }
                if self.rg(*s) {
                    let av = self.value(*a);
                    let d: f64 = gd
                        .iter()
                        .zip(av.data())
                        .map(|(x, y)| x.as_f64() * y.as_f64())
                        .sum();
                    let shape = self.shape(*s).to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, vec![F::of(d)])?);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = av.shape();
                let sb = bv.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let shared = sb.len() == 2;
                if self.rg(*a) {
                    let mut ga = vec![F::zero(); av.numel()];
                    if shared {
                        gemm_nt(av.numel() / k, n, k, gd, bv.data(), &mut ga);
                    } else {
                        for ((gb, bb), cb) in gd
                            .chunks_exact(m * n)
                            .zip(bv.data().chunks_exact(k * n))
                            .zip(ga.chunks_exact_mut(m * k))
                        {
                            gemm_nt(m, n, k, gb, bb, cb);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), ga)?);
                }
                if self.rg(*b) {
                    let mut gbv = vec![F::zero(); bv.numel()];
                    if shared {
                        gemm_tn(k, av.numel() / k, n, av.data(), gd, &mut gbv);
                    } else {
                        for ((ab, gb), cb) in av
                            .data()
                            .chunks_exact(m * k)
                            .zip(gd.chunks_exact(m * n))
                            .zip(gbv.chunks_exact_mut(k * n))
                        {
                            gemm_tn(k, m, n, ab, gb, cb);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(sb.to_vec(), gbv)?);
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, permute_tensor(g, &inv)?);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape)?);
            }
            Op::Expand(a) => {
                let av = self.value(*a);
                let mut ga = vec![F::zero(); av.numel()];
                for chunk in gd.chunks_exact(av.numel()) {
                    for (s, &x) in ga.iter_mut().zip(chunk) {
                        *s = *s + x;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = g.axis_split(*axis)?;
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let len = shape[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(shape, gp)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let sv = self.value(*src);
                let (outer, n, inner) = sv.axis_split(*axis)?;
                let len = g.shape()[*axis];
                let mut gs = vec![F::zero(); sv.numel()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gs[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *src, Tensor::new(sv.shape().to_vec(), gs)?);
            }
            Op::Gather(a, indices) => {
                let av = self.value(*a);
                let inner = av.numel() / av.shape()[0];
                let mut ga = vec![F::zero(); av.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (s, &x) in ga[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&gd[r * inner..(r + 1) * inner])
                    {
                        *s = *s + x;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = node.value.axis_split(*axis)?;
                let mut ga = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let dotp = (0..n).fold(F::zero(), |s, j| s + gd[idx(j)] * y[idx(j)]);
                        for j in 0..n {
                            ga[idx(j)] = y[idx(j)] * (gd[idx(j)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), ga)?);
            }
            Op::MaskedSoftmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut ga = vec![F::zero(); y.len()];
                for ((yr, gr), out) in y.chunks_exact(n).zip(gd.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                    let dotp = yr.iter().zip(gr).fold(F::zero(), |s, (&p, &q)| s + p * q);
                    for ((o, &p), &q) in out.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dotp);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), ga)?);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let ga: Vec<F> = av
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| g * F::of(gelu_grad(x.as_f64())))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![F::zero(); d];
                    let mut gbeta = vec![F::zero(); d];
                    for (gr, hr) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * hr[j];
                            gbeta[j] = gbeta[j] + gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![d], gg)?);
                    self.accumulate(grads, *beta, Tensor::new(vec![d], gbeta)?);
                }
                if self.rg(*x) {
                    let mut gx = Vec::with_capacity(gd.len());
                    let inv_d = 1.0 / d as f64;
                    for ((gr, hr), &r) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = (gr[j] * gam[j]).as_f64();
                            s1 += dh;
                            s2 += dh * hr[j].as_f64();
                        }
                        for j in 0..d {
                            let dh = (gr[j] * gam[j]).as_f64();
                            let h = hr[j].as_f64();
                            gx.push(F::of(r.as_f64() * (dh - s1 * inv_d - h * s2 * inv_d)));
                        }
                    }
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, gx)?);
                }
            }
            Op::Mean(a, axis) => {
                let av = self.value(*a);
                let (outer, n, inner) = av.axis_split(*axis)?;
                let scale = F::of(1.0 / n as f64);
                let mut ga = vec![F::zero(); av.numel()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[o * n * inner + j * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(av.shape().to_vec(), gd[0])?);
            }
            Op::Exp(a) => {
                let ga: Vec<F> = node.value.data().iter().zip(gd).map(|(&y, &g)| y * g).collect();
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), ga)?);
            }
            Op::L2Normalize(a, norms) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks_exact(d).zip(gd.chunks_exact(d)).zip(norms) {
                    let dotp: f64 = yr.iter().zip(gr).map(|(p, q)| p.as_f64() * q.as_f64()).sum();
                    for (&p, &q) in yr.iter().zip(gr) {
                        ga.push(F::of((q.as_f64() - p.as_f64() * dotp) / n.as_f64()));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), ga)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let v = *lv.shape().last().unwrap_or(&1);
                let count = targets.iter().filter(|t| t.is_some()).count();
                let scale = gd[0].as_f64() / count as f64;
                let mut gl = vec![F::zero(); lv.numel()];
                for ((out, prow), t) in gl.chunks_exact_mut(v).zip(probs.chunks_exact(v)).zip(targets) {
                    let Some(t) = *t else { continue };
                    for (o, &p) in out.iter_mut().zip(prow) {
                        *o = F::of(p.as_f64() * scale);
                    }
                    out[t] = F::of((prow[t].as_f64() - 1.0) * scale);
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), gl)?);
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    named: BTreeMap<String, Var>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to a leaf (zeros for leaves the loss does not touch).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.named.get(name).and_then(|&v| self.wrt(v))
    }

    /// Gradients of every named leaf that required one, keyed by name.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor<F>> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.named) {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

fn permute_tensor<F: Real>(src: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let shape = src.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let x = src.data();
    let mut out = Vec::with_capacity(x.len());
    // The innermost output axis is copied in a tight loop.
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..last].iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner_n).map(|j| x[base + j * inner_s]));
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let r = g.matmul(a, i).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_identity_padded() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]));
        let b = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let r = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(r), &[2, 2]);
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![4, 2]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[4], &[0.0; 4]));
        let s = g.softmax(z, 0).unwrap();
        assert!(g.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-12));

        let big = g.constant(t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(big, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6);

        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.softmax(x, 0).unwrap();
        let want = [0.0900, 0.2447, 0.6652];
        for (p, w) in g.value(s).data().iter().zip(want) {
            assert!((p - w).abs() < 1e-4);
        }
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_sums_to_one_along_inner_axis() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| (i as f32).sin() * 3.0).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for o in 0..2 {
            for i in 0..4 {
                let total: f32 = (0..3).map(|j| v.get(&[o, j, i]).unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[4], &[0.3, -1.0, 2.0, 0.1]));
        let s = g.softmax(x, 0).unwrap();
        let total = g.sum(s);
        let grads = g.backward(total).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unused_leaves() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let unused = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_rejects_empty_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 1.0, 1.0]));
        let mask: Arc<[bool]> = vec![true, false, true, false, false, false].into();
        assert!(matches!(
            g.masked_softmax(x, mask),
            Err(Error::FullyMaskedRow { row: 1 })
        ));
        let mask: Arc<[bool]> = vec![true, false, true, true, true, false].into();
        let s = g.masked_softmax(x, mask).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4, 5], |i| i as f32).unwrap());
        let p = g.permute(x, &[0, 2, 1, 3]).unwrap();
        assert_eq!(g.shape(p), &[2, 4, 3, 5]);
        assert_eq!(
            g.value(p).get(&[1, 3, 2, 4]).unwrap(),
            g.value(x).get(&[1, 2, 3, 4]).unwrap()
        );
        let back = g.permute(p, &[0, 2, 1, 3]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn cross_entropy_uniform_and_excluded_rows() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(vec![3, 4]).unwrap());
        let l = g.cross_entropy(logits, &[Some(1), None, Some(3)]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(logits, &[None, None, None]).is_err());
    }

    #[test]
    fn mean_of_identical_f32_values_is_exact() {
        let mut g = Graph::<f32>::new();
        let v = 0.1f32 + 1e-7;
        let x = g.constant(Tensor::full(vec![7, 3], v).unwrap());
        let m = g.mean(x, 0).unwrap();
        assert!(g.value(m).data().iter().all(|&y| y == v));
    }
}
